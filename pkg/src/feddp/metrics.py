"""FLOPs and communication accounting, per-round records and their CSV form."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from feddp import dpgate
from feddp.errors import StructuralError
from feddp.nn.spec import LayerSpec, ModelSpec, Unit

BYTES_PER_PARAM = 4

CSV_COLUMNS = ("run_id", "strategy", "pruning", "round", "avg_local_top1", "global_top1",
               "bytes_up_weights", "bytes_up_variates", "bytes_down_weights",
               "bytes_down_variates", "flops_per_sample", "sparsity", "seconds")


# -- FLOPs ------------------------------------------------------------------

def conv_flops(spec: LayerSpec | Unit, active_in: int, active_out: int, out_h: int,
               out_w: int) -> int:
    """2 * active_out * active_in * k^2 * out_h * out_w (one MAC = 2 FLOPs)."""
    if isinstance(spec, Unit):
        k, cin, cout = spec.kernel, spec.cin, spec.cout
    else:
        k, cin, cout = spec.kernel_size, spec.in_channels, spec.out_channels
    if not (0 <= active_in <= cin and 0 <= active_out <= cout):
        raise StructuralError(
            f"{spec.name}: active channels ({active_in}, {active_out}) exceed ({cin}, {cout})")
    return 2 * int(active_out) * int(active_in) * k * k * int(out_h) * int(out_w)


def linear_flops(in_features: int, out_features: int) -> int:
    return 2 * int(in_features) * int(out_features)


def _widths(model: ModelSpec, decisions) -> dict[str, int]:
    if decisions is None:
        return {}
    if isinstance(decisions, dict) and all(isinstance(v, (int, np.integer))
                                           for v in decisions.values()):
        missing = [u.name for u in model.gated_units() if u.name not in decisions]
        if missing:
            raise StructuralError(f"no kept width for {missing}")
        return {k: int(v) for k, v in decisions.items()}
    widths = dpgate.active_widths(model, decisions)
    return {k: int(v[0]) for k, v in widths.items()}


def layer_flops(model: ModelSpec, decisions=None) -> list[tuple[str, int]]:
    """Per-unit FLOPs per sample; ``decisions`` is None (full width), a list of
    gate decisions, or a mapping from gated conv name to kept width."""
    widths = _widths(model, decisions)
    rows = []
    for u in model.units:
        if u.kind == "conv2d":
            a_in = widths.get(u.input_gate, u.cin) if u.input_gate else u.cin
            a_out = widths.get(u.name, u.cout) if u.gated else u.cout
            rows.append((u.name, conv_flops(u, a_in, a_out, *u.out_hw)))
        elif u.kind == "linear":
            rows.append((u.name, linear_flops(u.cin, u.cout)))
    return rows


def model_flops(model: ModelSpec, decisions=None) -> int:
    return sum(f for _, f in layer_flops(model, decisions))


def keep_widths(model: ModelSpec, keep_ratio=None) -> dict[str, int]:
    return {name: s.keep for name, s in dpgate.gate_specs(model, keep_ratio).items()}


def flops_report(model: ModelSpec, keep_ratio=None) -> dict:
    original = model_flops(model)
    pruned = model_flops(model, keep_widths(model, keep_ratio))
    return {"model": model.name, "original_flops": original, "pruned_flops": pruned,
            "ratio": pruned / original, "reduction_pct": 100.0 * (1 - pruned / original)}


# -- communication cost -----------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    params_count: int
    rounds_to_target: int | None
    clients: int
    sample_rate: float
    param_uploads: float | None
    total_bytes: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def comm_cost(params_count, rounds_to_target, clients, sample_rate) -> CostReport:
    """params x rounds x clients x sample_rate parameter uploads, 4 bytes each.

    A run that never reached its target has no cost figure (both totals None).
    """
    for label, v in (("params_count", params_count), ("clients", clients),
                     ("sample_rate", sample_rate)):
        if v < 0:
            raise ValueError(f"{label} must be nonnegative")
    if rounds_to_target is None:
        return CostReport(int(params_count), None, int(clients), float(sample_rate), None, None)
    if rounds_to_target < 0:
        raise ValueError("rounds_to_target must be nonnegative")
    uploads = params_count * rounds_to_target * clients * sample_rate
    return CostReport(int(params_count), rounds_to_target, int(clients), float(sample_rate),
                      uploads, uploads * BYTES_PER_PARAM)


def rounds_to_target(stream, target: float) -> int | None:
    """1-indexed first round whose average local accuracy reaches ``target``."""
    for i, m in enumerate(stream, 1):
        acc = m.avg_local_top1 if isinstance(m, RoundMetrics) else m
        if acc >= target:
            return i
    return None


# -- ledger -----------------------------------------------------------------

DIRECTIONS = ("up", "down")
KINDS = ("weights", "variates")


@dataclass
class CommLedger:
    """Cumulative transmitted bytes, tagged by direction and payload kind."""
    totals: dict[tuple[str, str], int] = field(
        default_factory=lambda: {(d, k): 0 for d in DIRECTIONS for k in KINDS})
    names: set[str] = field(default_factory=set)
    gate_bytes: int = 0
    messages: int = 0

    def record(self, direction: str, kind: str, params) -> int:
        if (direction, kind) not in self.totals:
            raise ValueError(f"unknown ledger tag {direction}/{kind}")
        n = params.nbytes()
        self.totals[(direction, kind)] += n
        self.names.update(params.names())
        self.gate_bytes += sum(p.value.nbytes for name, p in params if ".gate." in name)
        self.messages += 1
        return n

    def get(self, direction: str, kind: str) -> int:
        return self.totals[(direction, kind)]

    def snapshot(self) -> dict[str, int]:
        return {f"bytes_{d}_{k}": v for (d, k), v in self.totals.items()}


# -- per-round records ------------------------------------------------------

@dataclass
class RoundMetrics:
    round: int
    avg_local_top1: float
    global_top1: float
    client_top1: list[float]
    bytes_up_weights: int
    bytes_up_variates: int
    bytes_down_weights: int
    bytes_down_variates: int
    flops_per_sample: float
    sparsity: float
    seconds: float = 0.0

    def __post_init__(self):
        accs = [self.avg_local_top1, self.global_top1, *self.client_top1]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"round {self.round}: accuracy outside [0, 1]")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Appends one CSV row per round and flushes it immediately."""

    def __init__(self, path, run_id: str, strategy: str, pruning: bool):
        self.path = Path(path)
        self.run_id, self.strategy, self.pruning = run_id, strategy, pruning
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(CSV_COLUMNS)
        self._fh.flush()

    def write(self, m: RoundMetrics) -> None:
        row = (self.run_id, self.strategy, self.pruning, m.round, m.avg_local_top1,
               m.global_top1, m.bytes_up_weights, m.bytes_up_variates, m.bytes_down_weights,
               m.bytes_down_variates, m.flops_per_sample, m.sparsity, m.seconds)
        self._csv.writerow([_fmt(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
                          + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")
