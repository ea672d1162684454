"""Dynamic pruning gates.

A gate looks at the feature map entering a convolution, averages away the
spatial dimensions, maps the channel means through a linear layer and keeps
the ``keep`` output channels with the highest sigmoid saliency. Kept
channels are scaled by their saliency, dropped channels are exactly zero,
and the pre-activations feed an L1 penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from feddp.errors import StructuralError
from feddp.nn import layers
from feddp.nn.autodiff import Node
from feddp.nn.params import Param, ParamSet
from feddp.nn.spec import ModelSpec

DEFAULT_LASSO = 5e-3
GATE_BIAS_INIT = 2.0


@dataclass(frozen=True)
class GateSpec:
    layer_name: str
    in_channels: int
    out_channels: int
    keep: int
    lasso: float = DEFAULT_LASSO

    def __post_init__(self):
        if not 1 <= self.keep <= self.out_channels:
            raise StructuralError(
                f"{self.layer_name}: keep={self.keep} outside [1, {self.out_channels}]")
        if self.lasso < 0:
            raise StructuralError(f"{self.layer_name}: negative lasso coefficient")


@dataclass
class GateDecision:
    """Batched decision of one gate; row ``b`` belongs to sample ``b``."""
    layer_name: str
    selected: np.ndarray        # (B, keep), strictly increasing per row
    saliency: np.ndarray        # (B, C_out)
    pre_activation: np.ndarray  # (B, C_out)
    pre_node: Node | None = None
    scale_node: Node | None = None

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.saliency.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m

    @property
    def keep(self) -> int:
        return self.selected.shape[1]

    def sample(self, b: int) -> GateDecision:
        return GateDecision(self.layer_name, self.selected[b:b + 1], self.saliency[b:b + 1],
                            self.pre_activation[b:b + 1])


@dataclass
class GateState:
    """Gate specs keyed by conv name, plus their (client-local) parameters."""
    specs: dict[str, GateSpec]
    params: ParamSet

    @property
    def lasso(self) -> float:
        vals = {s.lasso for s in self.specs.values()}
        return vals.pop() if len(vals) == 1 else max(vals)


def keep_count(ratio: float, channels: int) -> int:
    return min(channels, max(1, math.floor(ratio * channels + 0.5)))


def gate_specs(model: ModelSpec, keep_ratio: float | dict | None = None,
               lasso: float = DEFAULT_LASSO) -> dict[str, GateSpec]:
    """One spec per gated conv. ``keep_ratio`` may map layer names to ratios."""
    specs = {}
    for u in model.gated_units():
        r = keep_ratio
        if isinstance(keep_ratio, dict):
            r = keep_ratio.get(u.name, model.default_keep_ratio)
        elif keep_ratio is None:
            r = model.default_keep_ratio
        specs[u.name] = GateSpec(u.name, u.cin, u.cout, keep_count(r, u.cout), lasso)
    return specs


def init_gate_params(specs: dict[str, GateSpec], rng: np.random.Generator,
                     dtype=np.float64, weight_scale: float = 0.1) -> ParamSet:
    entries = []
    for name, s in specs.items():
        bound = weight_scale / math.sqrt(s.in_channels)
        w = rng.uniform(-bound, bound, size=(s.out_channels, s.in_channels)).astype(dtype)
        entries.append((f"{name}.gate.weight", Param(w)))
        entries.append((f"{name}.gate.bias",
                        Param(np.full(s.out_channels, GATE_BIAS_INIT, dtype=dtype))))
    return ParamSet(entries)


def build_gates(model: ModelSpec, rng: np.random.Generator, keep_ratio=None,
                lasso: float = DEFAULT_LASSO, dtype=np.float64) -> GateState:
    specs = gate_specs(model, keep_ratio, lasso)
    return GateState(specs, init_gate_params(specs, rng, dtype))


# -- pure functions ---------------------------------------------------------

def subsample(x: np.ndarray) -> np.ndarray:
    """Spatial average: (B, C, H, W) -> (B, C)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise StructuralError(f"expected a (B, C, H, W) map, got {x.shape}")
    return x.mean(axis=(2, 3))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the ``k`` largest entries, ties to the lowest index,
    returned in increasing index order."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gate_decide(s: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                spec: GateSpec) -> GateDecision:
    s = np.atleast_2d(s)
    if s.shape[1] != spec.in_channels or weight.shape != (spec.out_channels, spec.in_channels):
        raise StructuralError(f"{spec.layer_name}: gate shapes do not match input {s.shape}")
    pre = s @ weight.T + bias
    # Ranking the pre-activations is the same as ranking the saliency (sigmoid
    # is strictly increasing) but does not collapse ties where it saturates.
    return GateDecision(spec.layer_name, top_k(pre, spec.keep), _sigmoid(pre), pre)


def lasso_gate_loss(decisions: list[GateDecision], lam: float) -> float:
    if lam < 0:
        raise StructuralError("lasso coefficient must be >= 0")
    total = 0.0
    for d in decisions:
        total += np.abs(d.pre_activation).sum() / d.pre_activation.shape[0]
    return lam * total


def gated_conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                       decision_out: GateDecision, decision_in: GateDecision | None = None,
                       stride: int = 1, padding: int = 1) -> np.ndarray:
    """Sliced gated convolution, one sample at a time.

    Only the selected filters, restricted to the selected input channels,
    are evaluated; everything else in the output stays zero.
    """
    bsz, cin = x.shape[:2]
    cout = weight.shape[0]
    if weight.shape[1] != cin or decision_out.saliency.shape != (bsz, cout):
        raise StructuralError("gate decision does not match convolution shapes")
    if decision_in is not None and decision_in.saliency.shape[1] != cin:
        raise StructuralError("input gate decision does not match input channels")
    out = None
    for b in range(bsz):
        sel_out = decision_out.selected[b]
        sel_in = decision_in.selected[b] if decision_in is not None else np.arange(cin)
        w_hat = weight[sel_out][:, sel_in]
        b_hat = None if bias is None else bias[sel_out]
        y = layers.conv2d_raw(x[b:b + 1, sel_in], w_hat, b_hat, stride, padding)[0]
        if out is None:
            out = np.zeros((bsz, cout) + y.shape[1:], dtype=y.dtype)
        out[b, sel_out] = y * decision_out.saliency[b, sel_out][:, None, None]
    return out


# -- taped ops --------------------------------------------------------------

def gate_node(x: Node, gates: GateState, layer_name: str) -> GateDecision:
    """Record the gate of ``layer_name`` on ``x``'s tape.

    The returned decision carries ``scale_node`` (saliency on kept channels,
    zero elsewhere) and ``pre_node`` for the L1 penalty.
    """
    spec = gates.specs[layer_name]
    w = gates.params[f"{layer_name}.gate.weight"]
    b = gates.params[f"{layer_name}.gate.bias"]
    s = layers.spatial_mean(x, f"{layer_name}.gate.subsample")
    # gate work is not part of the backbone FLOPs budget
    pre = layers.linear(s, w, b, f"{layer_name}.gate.linear", count_flops=False)
    sal = layers.sigmoid(pre, f"{layer_name}.gate.sigmoid")
    selected = top_k(pre.value, spec.keep)
    mask = np.zeros(pre.value.shape, dtype=pre.value.dtype)
    np.put_along_axis(mask, selected, 1, axis=1)
    scale = layers.mul_const(sal, mask, f"{layer_name}.gate.mask")
    decision = GateDecision(layer_name, selected, sal.value, pre.value, pre, scale)
    x.tape.decisions.append(decision)
    return decision


def lasso_node(decisions: list[GateDecision], lam: float) -> Node:
    return layers.l1_mean([d.pre_node for d in decisions], lam, "gate_lasso")


# -- accounting -------------------------------------------------------------

def active_widths(model: ModelSpec, decisions) -> dict[str, np.ndarray]:
    """Per-sample kept-channel counts for each gated conv."""
    if isinstance(decisions, dict):
        decisions = list(decisions.values())
    widths = {}
    for d in decisions:
        sel = np.atleast_2d(d.selected)
        widths[d.layer_name] = np.full(sel.shape[0], sel.shape[1], dtype=np.int64)
    missing = [u.name for u in model.gated_units() if u.name not in widths]
    if missing:
        raise StructuralError(f"no gate decision for {missing}")
    return widths


def sparsity_ratio(decisions, model: ModelSpec) -> float:
    """Fraction of trainable backbone parameters that the decisions keep.

    Convs count only their kept filters restricted to kept input channels,
    norms count only kept channels; ungated layers count fully. Averaged
    over the samples in the batch.
    """
    if not decisions:
        return 1.0
    widths = active_widths(model, decisions)
    bsz = next(iter(widths.values())).shape[0]
    kept = np.zeros(bsz, dtype=np.int64)
    for u in model.units:
        a_in = widths[u.input_gate] if u.input_gate else u.cin
        if u.kind == "conv2d":
            a_out = widths[u.name] if u.gated else u.cout
            kept = kept + a_out * a_in * u.kernel ** 2 + (a_out if u.has_bias else 0)
        elif u.kind == "norm":
            kept = kept + 2 * (widths[u.input_gate] if u.input_gate else u.cout)
        else:
            kept = kept + u.num_params
    return float(np.mean(kept / model.num_params()))
