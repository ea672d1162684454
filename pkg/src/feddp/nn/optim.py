from __future__ import annotations

import math

from feddp.nn.params import ParamSet


def sgd_step(params: ParamSet, lr: float, weight_decay: float = 0.0,
             correction: ParamSet | None = None, extra: ParamSet | None = None,
             travel: ParamSet | None = None) -> None:
    """In-place ``p -= lr * (grad + weight_decay * p + correction + extra)``.

    ``correction`` is the drift term ``c_g - c_l``; ``extra`` is any other
    gradient addend (the proximal term). ``travel``, when given, accumulates
    each applied ``lr * (...)``. Non-trainable entries are skipped.
    """
    if correction is not None:
        params.check_structure(correction, "correction")
    if extra is not None:
        params.check_structure(extra, "gradient addend")
    for name, p in params:
        if not p.trainable:
            continue
        step = p.grad
        if weight_decay:
            step = step + weight_decay * p.value
        if correction is not None:
            step = step + correction[name].value
        if extra is not None:
            step = step + extra[name].value
        step = lr * step
        p.value -= step
        if travel is not None:
            travel[name].value += step


def cosine_lr(epoch_index: int, epochs_per_round: int, base_lr: float) -> float:
    """Per-epoch cosine decay that restarts every round."""
    if not 0 <= epoch_index < epochs_per_round:
        raise ValueError(f"epoch_index {epoch_index} outside [0, {epochs_per_round})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch_index / epochs_per_round))
