"""Named parameter collections and their wire format.

A ``ParamSet`` carries every kind of parameter bundle the simulator moves
around: backbone weights, gate weights and control variates all share it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from feddp.errors import FormatError, StructuralError

_MAGIC = b"FDPS"
_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    # Non-trainable entries (normalization running stats) travel with the
    # weights but are never touched by the optimizer.
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise StructuralError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


class ParamSet:
    """Ordered, uniquely named collection of :class:`Param`.

    Arithmetic between two sets requires them to be structure-equal (same
    names, order and shapes); it returns a new set with fresh zero grads and
    keeps the trainable flags of the left operand.
    """

    def __init__(self, entries=()):
        self._entries: dict[str, Param] = {}
        for name, param in entries:
            if name in self._entries:
                raise StructuralError(f"duplicate parameter name {name!r}")
            if not isinstance(param, Param):
                param = Param(np.asarray(param))
            self._entries[name] = param

    # -- container protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[str, Param]]:
        return iter(self._entries.items())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise StructuralError(f"no parameter named {name!r}") from None

    def names(self) -> list[str]:
        return list(self._entries)

    def params(self) -> list[Param]:
        return list(self._entries.values())

    def shapes(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self._entries.values()]

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{tuple(p.shape)}" for n, p in self)
        return f"ParamSet({inner})"

    # -- structure ----------------------------------------------------------

    def structure_equal(self, other: ParamSet) -> bool:
        if len(self) != len(other):
            return False
        return all(
            na == nb and pa.shape == pb.shape
            for (na, pa), (nb, pb) in zip(self, other)
        )

    def check_structure(self, other: ParamSet, what: str = "operand") -> None:
        if not self.structure_equal(other):
            raise StructuralError(
                f"{what} is not structure-equal: {self!r} vs {other!r}"
            )

    def num_values(self, trainable_only: bool = False) -> int:
        return sum(
            p.value.size for p in self._entries.values()
            if p.trainable or not trainable_only
        )

    # -- algebra ------------------------------------------------------------

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet(
            (n, Param(np.asarray(fn(p.value)), trainable=p.trainable))
            for n, p in self
        )

    def zip_map(self, other: ParamSet, fn) -> ParamSet:
        self.check_structure(other)
        return ParamSet(
            (n, Param(np.asarray(fn(p.value, q.value)), trainable=p.trainable))
            for (n, p), (_, q) in zip(self, other)
        )

    def __add__(self, other: ParamSet) -> ParamSet:
        return self.zip_map(other, np.add)

    def __sub__(self, other: ParamSet) -> ParamSet:
        return self.zip_map(other, np.subtract)

    def scale(self, factor: float) -> ParamSet:
        return self.map(lambda v: v * factor)

    def __mul__(self, factor: float) -> ParamSet:
        return self.scale(factor)

    __rmul__ = __mul__

    def copy(self) -> ParamSet:
        return self.map(np.copy)

    def zeros_like(self) -> ParamSet:
        return self.map(np.zeros_like)

    def astype(self, dtype) -> ParamSet:
        return self.map(lambda v: v.astype(dtype))

    def assign(self, other: ParamSet) -> None:
        """Copy ``other``'s values into this set in place."""
        self.check_structure(other)
        for (_, p), (_, q) in zip(self, other):
            p.value[...] = q.value

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.zero_grad()

    def grads(self) -> ParamSet:
        return ParamSet(
            (n, Param(p.grad.copy(), trainable=p.trainable)) for n, p in self
        )

    def is_zero(self) -> bool:
        return all(not np.any(p.value) for p in self._entries.values())

    def bitwise_equal(self, other: ParamSet) -> bool:
        if not self.structure_equal(other):
            return False
        return all(
            p.value.dtype == q.value.dtype
            and p.value.tobytes() == q.value.tobytes()
            for (_, p), (_, q) in zip(self, other)
        )

    # -- wire format --------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Serialize to the flat blob used for communication accounting.

        Layout: ``FDPS`` magic, u32 version, u32 entry count, then per entry
        a header (u16 name length, utf-8 name, u8 itemsize, u8 trainable,
        u8 ndim, u32 dims), followed by every entry's raw little-endian
        values in entry order.
        """
        head = [_MAGIC, struct.pack("<II", _VERSION, len(self))]
        body = []
        for name, p in self:
            raw = name.encode("utf-8")
            itemsize = p.value.dtype.itemsize
            if itemsize not in _DTYPES or p.value.dtype.kind != "f":
                raise StructuralError(f"{name}: unsupported dtype {p.value.dtype}")
            head.append(struct.pack("<H", len(raw)))
            head.append(raw)
            head.append(struct.pack("<BBB", itemsize, int(p.trainable), p.value.ndim))
            head.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            body.append(np.ascontiguousarray(p.value, dtype=_DTYPES[itemsize]).tobytes())
        return b"".join(head + body)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamSet:
        view = memoryview(blob)
        if bytes(view[:4]) != _MAGIC:
            raise FormatError("not a parameter blob (bad magic)")
        try:
            version, count = struct.unpack_from("<II", view, 4)
            if version != _VERSION:
                raise FormatError(f"unsupported blob version {version}")
            off = 12
            headers = []
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", view, off)
                off += 2
                name = bytes(view[off:off + nlen]).decode("utf-8")
                off += nlen
                itemsize, trainable, ndim = struct.unpack_from("<BBB", view, off)
                off += 3
                shape = struct.unpack_from(f"<{ndim}I", view, off)
                off += 4 * ndim
                if itemsize not in _DTYPES:
                    raise FormatError(f"{name}: bad itemsize {itemsize}")
                headers.append((name, _DTYPES[itemsize], bool(trainable), shape))
        except struct.error as exc:
            raise FormatError(f"truncated blob header: {exc}") from None
        entries = []
        for name, dtype, trainable, shape in headers:
            n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + n > len(view):
                raise FormatError(f"truncated blob data for {name!r} at offset {off}")
            value = np.frombuffer(view[off:off + n], dtype=dtype).reshape(shape).copy()
            off += n
            entries.append((name, Param(value.astype(dtype.newbyteorder("=")), trainable=trainable)))
        if off != len(view):
            raise FormatError(f"{len(view) - off} trailing bytes after blob")
        return cls(entries)

    def nbytes(self) -> int:
        """Length of :meth:`to_bytes` without building the blob."""
        total = 12
        for name, p in self:
            total += 2 + len(name.encode("utf-8")) + 3 + 4 * p.value.ndim
            total += p.value.size * p.value.dtype.itemsize
        return total
