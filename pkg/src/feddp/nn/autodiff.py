"""A linear tape for reverse-mode differentiation.

Every op appends one record holding its output value, the indices of its
parent nodes and a closure mapping the output adjoint to parent adjoints.
Parameter gradients are accumulated by the closures themselves, so params
never appear as nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from feddp.errors import NumericError, UsageError


@dataclass(eq=False)
class Node:
    value: np.ndarray
    tape: "Tape"
    index: int

    @property
    def shape(self):
        return self.value.shape


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    parents: tuple[int, ...]
    backward: BackwardFn | None
    name: str


@dataclass(eq=False)
class Tape:
    records: list[_Record] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    # Per-sample multiply-accumulate work actually executed, times two.
    flops: np.ndarray | None = None
    decisions: list = field(default_factory=list)

    def leaf(self, value, name: str = "input") -> Node:
        return self.record(value, (), None, name)

    def record(self, value, parents: Sequence[Node], backward: BackwardFn | None,
               name: str) -> Node:
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        value = np.asarray(value)
        # a single reduction catches any NaN/Inf (and overflow, also an error)
        if value.dtype.kind == "f" and not np.isfinite(value.sum()):
            raise NumericError(f"non-finite activation in layer {name!r}")
        for p in parents:
            if p.tape is not self:
                raise UsageError(f"{name}: parent node belongs to another tape")
        node = Node(value, self, len(self.nodes))
        self.nodes.append(node)
        self.records.append(_Record(tuple(p.index for p in parents), backward, name))
        return node

    def add_flops(self, per_sample) -> None:
        per_sample = np.asarray(per_sample, dtype=np.int64)
        if self.flops is None:
            self.flops = per_sample.copy()
        else:
            self.flops = self.flops + per_sample


def backward(tape: Tape, loss_grad: float = 1.0, root: Node | None = None) -> None:
    """Propagate ``loss_grad`` from ``root`` (default: last node) to every param.

    A tape can be consumed once; gradients accumulate into ``Param.grad``.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by backward()")
    if not tape.nodes:
        raise UsageError("empty tape")
    root = tape.nodes[-1] if root is None else root
    if root.tape is not tape:
        raise UsageError("root node belongs to another tape")
    tape.consumed = True

    adjoints: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoints[root.index] = np.full_like(root.value, loss_grad, dtype=root.value.dtype)
    for i in range(root.index, -1, -1):
        g = adjoints[i]
        rec = tape.records[i]
        if g is None or rec.backward is None:
            continue
        parent_grads = rec.backward(g)
        for pi, pg in zip(rec.parents, parent_grads):
            if pg is None:
                continue
            if adjoints[pi] is None:
                adjoints[pi] = pg
            else:
                adjoints[pi] = adjoints[pi] + pg
        adjoints[i] = None
