"""Layer primitives on ``Tensor``: activations, conv2d, batch-norm, pooling, resampling."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import counters
from .tensor import Tensor, as_tensor, matmul, unbroadcast

log = logging.getLogger(__name__)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function kept inside the open interval (0, 1) even when it saturates in floating point."""
    fi = np.finfo(x.dtype)
    out = np.clip(_sigmoid_np(x.data), fi.tiny, 1.0 - fi.epsneg)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    xd = x.data
    pos = xd > 0
    if counters.tracing_branches():
        counters.record_branch(pos)
    out = np.where(pos, xd, slope * xd)
    return Tensor.from_op(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def hardswish(x: Tensor) -> Tensor:
    xd = x.data
    if counters.tracing_branches():
        counters.record_branch(np.digitize(xd, (-3.0, 3.0)).astype(np.int8))
    out = xd * np.clip(xd + 3.0, 0.0, 6.0) / 6.0
    dx = np.where(xd <= -3.0, 0.0, np.where(xd >= 3.0, 1.0, (2.0 * xd + 3.0) / 6.0))
    return Tensor.from_op(out, (x,), lambda g: (g * dx,), "hardswish")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    if counters.tracing_branches():
        counters.record_branch(xd > 0)
    return Tensor.from_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on raw logits; ``target`` is a constant in [0, 1]."""
    z = logits.data
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid_np(z)
    return Tensor.from_op(out, (logits,), lambda g: (g * (p - y),), "bce_with_logits")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat shape mismatch along axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis {axis} of extent {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(Tensor.from_op(np.ascontiguousarray(x.data[idx]), (x,), backward, "split"))
        start += n
    return outs


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return x.reshape(x.shape[:start] + (-1,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape [N, in], w of shape [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    counters.record_macs(out.size * wd.shape[1])
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if w.requires_grad else None
        gb = unbroadcast(g, b.shape) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    return x.mean(axis=(2, 3))


def nearest_upsample2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


# -- convolution -------------------------------------------------------


def _pad2(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding=0,
    method: str = "im2col",
) -> Tensor:
    """Cross-correlation of [N, Cin, H, W] with [Cout, Cin, kh, kw].

    ``method="im2col"`` unrolls windows into a matrix and does one matmul;
    ``method="direct"`` accumulates one channel contraction per kernel tap.
    Both share the same backward. Output extent is floor((H + 2p - k) / s) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ph, pw = _pad2(padding)
    ho = conv_output_size(h, kh, stride, ph)
    wo = conv_output_size(w, kw, stride, pw)
    xd, kd = x.data, kernel.data
    counters.record_macs(n * cout * ho * wo * cin * kh * kw)

    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
        return _conv1x1(x, kernel, bias)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    kmat = kd.reshape(cout, -1)
    cols = None
    if method == "im2col":
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = (cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    elif method == "direct":
        acc = np.zeros((cout, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                acc += np.tensordot(kd[:, :, i, j], patch, axes=([1], [1]))
        out = acc.transpose(1, 0, 2, 3)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        nonlocal cols
        gx = gk = gb = None
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if kernel.requires_grad:
            if cols is None:
                cols = _im2col(xp, kh, kw, stride, ho, wo)
            gk = (gm.T @ cols).reshape(kd.shape)
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N*Ho*Wo, C*kh*kw]."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv1x1(x: Tensor, kernel: Tensor, bias: Tensor | None) -> Tensor:
    n, cin, h, w = x.shape
    cout = kernel.shape[0]
    xf = x.data.reshape(n, cin, h * w)
    k2 = kernel.data.reshape(cout, cin)
    out = np.matmul(k2, xf)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, h, w)

    def backward(g):
        gf = g.reshape(n, cout, h * w)
        gx = np.matmul(k2.T, gf).reshape(x.shape) if x.requires_grad else None
        gk = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


# -- batch norm --------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    Training mode uses batch statistics and updates the running buffers in
    place (``running = (1 - momentum) * running + momentum * batch``, unbiased
    variance for the running estimate).
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    gd, bd = gamma.data, beta.data
    if training:
        count = xd.size // xd.shape[1]
        if count < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mu = xd.mean(axis=axes)
        var = ((xd - mu.reshape(bshape)) ** 2).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        count = None
        mu = running_mean
        var = running_var
    if (var < 0).any():
        log.warning("batch_norm: clamping negative variance %s to 0", var.min())
        var = np.maximum(var, 0.0)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = gd.reshape(bshape) * xhat + bd.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gd * invstd).reshape(bshape)
            if training:
                gx = scale / count * (count * g - gbeta.reshape(bshape) - xhat * ggamma.reshape(bshape))
            else:
                gx = scale * g
        return (
            gx,
            ggamma if gamma.requires_grad else None,
            gbeta if beta.requires_grad else None,
        )

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


__all__ = [
    "absolute",
    "batch_norm",
    "bce_with_logits",
    "concat",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "flatten",
    "global_avg_pool",
    "hardswish",
    "leaky_relu",
    "linear",
    "matmul",
    "nearest_upsample2x",
    "relu",
    "sigmoid",
    "split",
]
