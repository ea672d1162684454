"""Differentiable ops for the fixed layer vocabulary.

Each op takes a :class:`Node`, reads params directly and records a backward
closure on the node's tape. Activations are NCHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from feddp.errors import StructuralError
from feddp.nn.autodiff import Node
from feddp.nn.params import Param


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise StructuralError(
            f"conv output extent {out} < 1 (size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding})"
        )
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
               stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain cross-correlation, no tape. ``w`` is (C_out, C_in, K, K)."""
    bsz, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise StructuralError(f"conv weight {w.shape} does not fit input {x.shape}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    xp = _pad(x, padding)
    cols = _windows(xp, k, stride, ho, wo)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d(x: Node, weight: Param, bias: Param | None, stride: int, padding: int,
           name: str, active_in=None, active_out=None) -> Node:
    """Convolution; ``active_in``/``active_out`` are per-sample channel counts
    used only to tally executed work (masked channels carry zeros)."""
    tape = x.tape
    xv = x.value
    bsz, cin, h, wd = xv.shape
    w = weight.value
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise StructuralError(f"{name}: expected {wcin} input channels, got {cin}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    xp = _pad(xv, padding)
    cols = _windows(xp, k, stride, ho, wo)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.value[None, :, None, None]
    y = np.ascontiguousarray(y)

    a_in = np.full(bsz, cin) if active_in is None else np.asarray(active_in)
    a_out = np.full(bsz, cout) if active_out is None else np.asarray(active_out)
    tape.add_flops(2 * a_in.astype(np.int64) * a_out * k * k * ho * wo)

    def back(g):
        weight.grad += np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None:
            bias.grad += g.sum(axis=(0, 2, 3))
        dcols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C_in, K, K
        dxp = np.zeros(xp.shape, dtype=xv.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
        return (dxp,)

    return tape.record(y, (x,), back, name)


def linear(x: Node, weight: Param, bias: Param | None, name: str,
           count_flops: bool = True) -> Node:
    xv = x.value
    w = weight.value
    if xv.shape[-1] != w.shape[1]:
        raise StructuralError(f"{name}: expected {w.shape[1]} features, got {xv.shape[-1]}")
    y = xv @ w.T
    if bias is not None:
        y = y + bias.value
    if count_flops:
        x.tape.add_flops(np.full(xv.shape[0], 2 * w.shape[0] * w.shape[1], dtype=np.int64))

    def back(g):
        weight.grad += g.T @ xv
        if bias is not None:
            bias.grad += g.sum(axis=0)
        return (g @ w,)

    return x.tape.record(y, (x,), back, name)


def batch_norm(x: Node, gamma: Param, beta: Param, running_mean: Param,
               running_var: Param, name: str, train: bool = True, mask=None,
               momentum: float = 0.1, eps: float = 1e-5) -> Node:
    """Channel normalization restricted to the (sample, channel) pairs in ``mask``.

    Masked-out entries produce exactly zero; a channel no sample selected
    keeps its running statistics untouched.
    """
    xv = x.value
    bsz, c, h, wd = xv.shape
    if gamma.value.shape != (c,):
        raise StructuralError(f"{name}: {gamma.value.shape[0]} channels, input has {c}")
    dtype = xv.dtype
    m2 = np.ones((bsz, c), dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
    m = m2[:, :, None, None]
    g = gamma.value[None, :, None, None]

    if train:
        cnt = m2.sum(axis=0) * (h * wd)
        live = cnt > 0
        safe = np.where(live, cnt, 1).astype(dtype)
        mean = (xv * m).sum(axis=(0, 2, 3)) / safe
        xc = (xv - mean[None, :, None, None]) * m
        var = (xc * xc).sum(axis=(0, 2, 3)) / safe
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd[None, :, None, None]
        y = (g * xhat + beta.value[None, :, None, None]) * m
        running_mean.value[live] = (1 - momentum) * running_mean.value[live] + momentum * mean[live]
        running_var.value[live] = (1 - momentum) * running_var.value[live] + momentum * var[live]

        def back(gy):
            gm = gy * m
            gamma.grad += (gm * xhat).sum(axis=(0, 2, 3))
            beta.grad += gm.sum(axis=(0, 2, 3))
            dxhat = gm * g
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            n = safe[None, :, None, None]
            dx = (invstd[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2) * m
            return (dx,)
    else:
        invstd = 1.0 / np.sqrt(running_var.value + eps)
        xhat = (xv - running_mean.value[None, :, None, None]) * invstd[None, :, None, None]
        y = (g * xhat + beta.value[None, :, None, None]) * m

        def back(gy):
            gm = gy * m
            gamma.grad += (gm * xhat).sum(axis=(0, 2, 3))
            beta.grad += gm.sum(axis=(0, 2, 3))
            return (gm * g * invstd[None, :, None, None],)

    return x.tape.record(y, (x,), back, name)


def relu(x: Node, name: str) -> Node:
    pos = x.value > 0
    return x.tape.record(np.where(pos, x.value, 0).astype(x.value.dtype), (x,),
                         lambda g: (g * pos,), name)


def avg_pool(x: Node, k: int, name: str) -> Node:
    bsz, c, h, wd = x.value.shape
    if h % k or wd % k:
        raise StructuralError(f"{name}: {h}x{wd} not divisible by pool size {k}")
    y = x.value.reshape(bsz, c, h // k, k, wd // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return x.tape.record(y, (x,), back, name)


def spatial_mean(x: Node, name: str) -> Node:
    """Average over H and W: (B, C, H, W) -> (B, C)."""
    bsz, c, h, wd = x.value.shape
    y = x.value.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.value.shape).copy(),)

    return x.tape.record(y, (x,), back, name)


def flatten(x: Node, name: str) -> Node:
    shape = x.value.shape
    return x.tape.record(x.value.reshape(shape[0], -1), (x,),
                         lambda g: (g.reshape(shape),), name)


def add(a: Node, b: Node, name: str) -> Node:
    if a.value.shape != b.value.shape:
        raise StructuralError(f"{name}: cannot add {a.value.shape} and {b.value.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g), name)


def sigmoid(x: Node, name: str) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),), name)


def mul_const(x: Node, const: np.ndarray, name: str) -> Node:
    return x.tape.record(x.value * const, (x,), lambda g: (g * const,), name)


def channel_scale(x: Node, scale: Node, name: str) -> Node:
    """``x[b, c] * scale[b, c]`` broadcast over space; both sides differentiable."""
    s = scale.value[:, :, None, None]
    y = x.value * s

    def back(g):
        return (g * s, (g * x.value).sum(axis=(2, 3)))

    return x.tape.record(y, (x, scale), back, name)


def cross_entropy(logits: Node, labels, name: str = "cross_entropy") -> Node:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.value
    labels = np.asarray(labels)
    bsz, ncls = z.shape
    if labels.shape != (bsz,):
        raise StructuralError(f"labels shape {labels.shape} != ({bsz},)")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise StructuralError(f"label out of range [0, {ncls})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(bsz), labels] - logsum
    loss = np.asarray(-logp.mean(), dtype=z.dtype)

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(bsz), labels] -= 1.0
        return (p * (g / bsz),)

    return logits.tape.record(loss, (logits,), back, name)


def l1_mean(nodes: list[Node], coefficient: float, name: str) -> Node:
    """``coefficient * sum_k mean_b ||nodes[k][b]||_1``."""
    if not nodes:
        raise StructuralError(f"{name}: no inputs")
    tape = nodes[0].tape
    dtype = nodes[0].value.dtype
    total = sum(np.abs(n.value).sum() / n.value.shape[0] for n in nodes)
    value = np.asarray(coefficient * total, dtype=dtype)

    def back(g):
        return tuple(g * coefficient * np.sign(n.value) / n.value.shape[0] for n in nodes)

    return tape.record(value, tuple(nodes), back, name)


def add_scalars(nodes: list[Node], name: str) -> Node:
    value = nodes[0].value
    for n in nodes[1:]:
        value = value + n.value
    return nodes[0].tape.record(value, tuple(nodes), lambda g: tuple(g for _ in nodes), name)
