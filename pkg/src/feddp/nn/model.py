"""Parameter layout, initialization and the taped forward pass."""

from __future__ import annotations

import math

import numpy as np

from feddp import dpgate
from feddp.errors import StructuralError
from feddp.nn import layers
from feddp.nn.autodiff import Node, Tape
from feddp.nn.params import Param, ParamSet
from feddp.nn.spec import ModelSpec, block_parts


def param_layout(model: ModelSpec) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, trainable) for every backbone entry, in canonical order."""
    out = []
    for u in model.units:
        if u.kind == "conv2d":
            out.append((f"{u.name}.weight", (u.cout, u.cin, u.kernel, u.kernel), True))
            out.append((f"{u.name}.bias", (u.cout,), True))
        elif u.kind == "norm":
            out.append((f"{u.name}.weight", (u.cout,), True))
            out.append((f"{u.name}.bias", (u.cout,), True))
            out.append((f"{u.name}.running_mean", (u.cout,), False))
            out.append((f"{u.name}.running_var", (u.cout,), False))
        else:
            out.append((f"{u.name}.weight", (u.cout, u.cin), True))
            out.append((f"{u.name}.bias", (u.cout,), True))
    return out


def init_params(model: ModelSpec, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    """He-uniform convs, fan-in uniform linears, zero biases, unit norms."""
    entries = []
    for name, shape, trainable in param_layout(model):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight" and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            v = rng.uniform(-1, 1, size=shape) * math.sqrt(6.0 / fan_in)
        elif leaf == "weight" and len(shape) == 2:
            v = rng.uniform(-1, 1, size=shape) / math.sqrt(shape[1])
        elif leaf == "weight" or leaf == "running_var":
            v = np.ones(shape)
        else:
            v = np.zeros(shape)
        entries.append((name, Param(v.astype(dtype), trainable=trainable)))
    return ParamSet(entries)


def check_params(model: ModelSpec, params: ParamSet) -> None:
    layout = param_layout(model)
    got = [(n, p.shape) for n, p in params]
    want = [(n, s) for n, s, _ in layout]
    if got != want:
        raise StructuralError(f"parameters do not match the {model.name} layout")


def _conv(node, params, name, stride, padding, active_in=None, active_out=None):
    return layers.conv2d(node, params[f"{name}.weight"], params[f"{name}.bias"],
                         stride, padding, name, active_in, active_out)


def _norm(node, params, name, train, mask):
    return layers.batch_norm(node, params[f"{name}.weight"], params[f"{name}.bias"],
                             params[f"{name}.running_mean"], params[f"{name}.running_var"],
                             name, train=train, mask=mask)


def _gated_conv(node, params, layer, gates, in_decision, stride, padding):
    """Conv, optionally followed by saliency scaling of its kept channels."""
    a_in = None if in_decision is None else in_decision.mask.sum(axis=1)
    if layer.gated and gates is not None:
        d = dpgate.gate_node(node, gates, layer.name)
        y = _conv(node, params, layer.name, stride, padding, a_in,
                  np.full(node.value.shape[0], d.keep))
        return layers.channel_scale(y, d.scale_node, f"{layer.name}.gate.scale"), d
    return _conv(node, params, layer.name, stride, padding, a_in), None


def forward(model: ModelSpec, params: ParamSet, x, gates: dpgate.GateState | None = None,
            train: bool = True, check: bool = True) -> tuple[Node, Tape]:
    """Run ``x`` through ``model``; returns the logits node and its tape.

    With ``gates`` None every channel is active. In training mode the norm
    layers use batch statistics and update their running estimates in place.
    ``tape.decisions`` holds the gate decisions and ``tape.flops`` the
    executed per-sample FLOPs.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise StructuralError(
            f"input shape {x.shape} does not match {model.name} input {model.input_shape}")
    if check:
        check_params(model, params)
    tape = Tape()
    tape.flops = np.zeros(x.shape[0], dtype=np.int64)
    node = tape.leaf(x)
    current = None  # decision governing the live channels of ``node``
    relu_i = pool_i = 0

    for layer in model.layers:
        kind = layer.kind
        if kind == "conv2d":
            node, current = _gated_conv(node, params, layer, gates, current,
                                        layer.stride, layer.padding)
        elif kind == "norm":
            node = _norm(node, params, layer.name, train,
                         None if current is None else current.mask)
        elif kind == "relu":
            relu_i += 1
            node = layers.relu(node, f"relu{relu_i}")
        elif kind == "avgpool":
            pool_i += 1
            node = layers.avg_pool(node, layer.pool, f"pool{pool_i}")
        elif kind == "globalavgpool":
            node = layers.spatial_mean(node, "global_pool")
            current = None
        elif kind == "flatten":
            node = layers.flatten(node, "flatten")
            current = None
        elif kind == "linear":
            node = layers.linear(node, params[f"{layer.name}.weight"],
                                 params[f"{layer.name}.bias"], layer.name)
        elif kind == "block":
            node = _block(node, params, layer, gates, current, train)
            current = None
    return node, tape


def _block(node, params, layer, gates, current, train):
    parts = block_parts(layer)
    inp = node
    h, d1 = _gated_conv(inp, params, parts["conv1"], gates, current, layer.stride, 1)
    h = _norm(h, params, parts["norm1"].name, train, None if d1 is None else d1.mask)
    h = layers.relu(h, f"{layer.name}.relu1")
    h, _ = _gated_conv(h, params, parts["conv2"], None, d1, 1, 1)
    h = _norm(h, params, parts["norm2"].name, train, None)
    if "proj" in parts:
        a_in = None if current is None else current.mask.sum(axis=1)
        skip = _conv(inp, params, parts["proj"].name, layer.stride, 0, a_in)
        skip = _norm(skip, params, parts["proj_norm"].name, train, None)
    else:
        skip = inp
    return layers.relu(layers.add(h, skip, f"{layer.name}.add"), f"{layer.name}.relu2")


def total_loss(logits: Node, labels, tape: Tape, lasso: float | None = None) -> Node:
    """Cross-entropy plus the gate L1 penalty when the tape holds decisions."""
    ce = layers.cross_entropy(logits, labels)
    if tape.decisions and lasso is not None:
        return layers.add_scalars([ce, dpgate.lasso_node(tape.decisions, lasso)], "loss")
    return ce


def predict(model: ModelSpec, params: ParamSet, x, gates=None, batch_size: int = 256):
    """Eval-mode logits and per-sample FLOPs/sparsity, batched."""
    logits, flops, sparsity = [], [], []
    for i in range(0, len(x), batch_size):
        out, tape = forward(model, params, x[i:i + batch_size], gates, train=False)
        logits.append(out.value)
        flops.append(tape.flops)
        if tape.decisions:
            sparsity.append(np.full(len(out.value), dpgate.sparsity_ratio(tape.decisions, model)))
        else:
            sparsity.append(np.ones(len(out.value)))
    if not logits:
        raise StructuralError("empty input")
    return np.concatenate(logits), np.concatenate(flops), np.concatenate(sparsity)
