"""Channel attention blocks sharing one contract: [N, C, H, W] -> [N, C, H, W].

``FBCA`` splits the spatial support with a single-channel sigmoid map into a
foreground part and its exact complement, pools the feature map under each
part into a channel vector, gates both vectors with independent MLPs and
rescales the channels by the difference of the two gates. ``SE``, ``ECA`` and
``CoordAttention`` are the comparison baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import functional as F
from .numerics.module import ConvBnAct, MlpGate, Module, he_normal, ones_param, zeros_param
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, matmul

KINDS = ("none", "se", "eca", "coord", "fbca")


@dataclass
class FBCAIntermediates:
    f_map_fore: Tensor
    f_map_back: Tensor
    v_fore: Tensor
    v_back: Tensor
    c_fore: Tensor | None = None
    c_back: Tensor | None = None
    d_w: Tensor | None = None


class FBCA(Module):
    """Fore-background contrast attention."""

    kind = "fbca"

    def __init__(
        self,
        channels: int,
        k: int = 5,
        r: int = 16,
        include_background: bool = True,
        residual: bool = False,
        negative_slope: float = 0.1,
        conv_bias: bool = True,
        rng: RngStream | None = None,
        dtype=np.float64,
    ):
        if channels % r:
            raise ValueError(f"compression ratio {r} must divide channel count {channels}")
        rng = rng or RngStream(0)
        self.cblr = ConvBnAct(channels, 1, k, rng=rng, conv_bias=conv_bias, negative_slope=negative_slope,
                              dtype=dtype)
        self.fore_gate = MlpGate(channels, r, rng=rng, negative_slope=negative_slope, dtype=dtype)
        self.back_gate = (
            MlpGate(channels, r, rng=rng, negative_slope=negative_slope, dtype=dtype) if include_background else None
        )
        self._channels = channels
        self._k = k
        self._r = r
        self._include_background = include_background
        self._residual = residual
        # test/inspection hooks: replace the foreground map or the channel scale
        self._force_fore_map: np.ndarray | None = None
        self._force_dw: np.ndarray | None = None
        self._last: FBCAIntermediates | None = None

    channels = property(lambda self: self._channels)
    k = property(lambda self: self._k)
    r = property(lambda self: self._r)
    include_background = property(lambda self: self._include_background)
    residual = property(lambda self: self._residual)

    @property
    def last(self) -> FBCAIntermediates | None:
        """Intermediates of the most recent forward pass."""
        return self._last

    def force(self, fore_map: np.ndarray | None = None, d_w: np.ndarray | None = None) -> None:
        self._force_fore_map = fore_map
        self._force_dw = d_w

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        out, _ = fbca_forward(x, self, training)
        return out


def fbca_embed(x: Tensor, block: FBCA, training: bool = False) -> FBCAIntermediates:
    """Activation maps and the two pooled channel vectors."""
    if x.ndim != 4:
        raise ValueError(f"expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if c != block.channels:
        raise ValueError(f"FBCA built for {block.channels} channels, got {c}")
    if block._force_fore_map is not None:
        fore = Tensor(np.broadcast_to(block._force_fore_map, (n, 1, h, w)).copy(), dtype=x.dtype)
    else:
        fore = F.sigmoid(block.cblr(x, training))
    back = 1.0 - fore
    feats_t = x.reshape(n, c, h * w).transpose(0, 2, 1)  # [N, HW, C]
    v_fore = matmul(fore.reshape(n, 1, h * w), feats_t).reshape(n, c)
    v_back = matmul(back.reshape(n, 1, h * w), feats_t).reshape(n, c)
    return FBCAIntermediates(fore, back, v_fore, v_back)


def fbca_contrast(inter: FBCAIntermediates, block: FBCA) -> Tensor:
    """Gate both vectors and take their difference; without background, d_w = c_fore."""
    inter.c_fore = block.fore_gate(inter.v_fore)
    if block.include_background:
        inter.c_back = block.back_gate(inter.v_back)
        inter.d_w = inter.c_fore - inter.c_back
    else:
        inter.c_back = None
        inter.d_w = inter.c_fore
    return inter.d_w


def fbca_forward(x: Tensor, block: FBCA, training: bool = False) -> tuple[Tensor, FBCAIntermediates]:
    inter = fbca_embed(x, block, training)
    d_w = fbca_contrast(inter, block)
    if block._force_dw is not None:
        d_w = Tensor(np.broadcast_to(block._force_dw, d_w.shape).copy(), dtype=x.dtype)
        inter.d_w = d_w
    n, c = d_w.shape
    out = x * d_w.reshape(n, c, 1, 1)
    if block.residual:
        out = out + x
    block._last = inter
    return out, inter


class SE(Module):
    """Squeeze-and-excitation: GAP -> FC-ReLU-FC -> sigmoid."""

    kind = "se"

    def __init__(self, channels: int, r: int = 16, rng: RngStream | None = None, dtype=np.float64):
        self.gate = MlpGate(channels, r, rng=rng, negative_slope=0.0, dtype=dtype)
        self._channels = channels

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        n, c = x.shape[:2]
        g = self.gate(F.global_avg_pool(x))
        return x * g.reshape(n, c, 1, 1)


class ECA(Module):
    """Efficient channel attention: GAP -> 1-D conv across channels (no bias) -> sigmoid."""

    kind = "eca"

    def __init__(self, channels: int, k: int = 3, rng: RngStream | None = None, dtype=np.float64):
        if k % 2 == 0:
            raise ValueError(f"ECA kernel size must be odd, got {k}")
        rng = rng or RngStream(0)
        self.kernel = he_normal(rng, (1, 1, 1, k), k, dtype)
        self._channels = channels
        self._k = k

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        y = F.global_avg_pool(x).reshape(n, 1, 1, c)
        y = F.conv2d(y, self.kernel, None, stride=1, padding=(0, (self._k - 1) // 2))
        return F.sigmoid(y.reshape(n, c))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        n, c = x.shape[:2]
        return x * self.gate(x).reshape(n, c, 1, 1)


def coord_mid_channels(channels: int, r: int) -> int:
    return max(8, channels // r)


class CoordAttention(Module):
    """Coordinate attention: per-axis pooling, shared 1x1 stem with BN + h-swish, per-axis sigmoid gates."""

    kind = "coord"

    def __init__(self, channels: int, r: int = 32, rng: RngStream | None = None, dtype=np.float64,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.03):
        rng = rng or RngStream(0)
        mip = coord_mid_channels(channels, r)
        self.stem_kernel = he_normal(rng, (mip, channels, 1, 1), channels, dtype)
        self.stem_bias = zeros_param((mip,), dtype)
        self.bn_gamma = ones_param((mip,), dtype)
        self.bn_beta = zeros_param((mip,), dtype)
        self.bn_running_mean = np.zeros(mip, dtype=dtype)
        self.bn_running_var = np.ones(mip, dtype=dtype)
        self.h_kernel = he_normal(rng, (channels, mip, 1, 1), mip, dtype)
        self.h_bias = zeros_param((channels,), dtype)
        self.w_kernel = he_normal(rng, (channels, mip, 1, 1), mip, dtype)
        self.w_bias = zeros_param((channels,), dtype)
        self._channels = channels
        self._mip = mip
        self._eps = bn_eps
        self._momentum = bn_momentum

    def gates(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """Returns (a_h [N, C, H, 1], a_w [N, C, 1, W])."""
        n, c, h, w = x.shape
        pooled_h = x.mean(axis=3, keepdims=True)  # [N, C, H, 1]
        pooled_w = x.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)  # [N, C, W, 1]
        y = F.concat([pooled_h, pooled_w], axis=2)
        y = F.conv2d(y, self.stem_kernel, self.stem_bias)
        y = F.batch_norm(y, self.bn_gamma, self.bn_beta, self.bn_running_mean, self.bn_running_var,
                         training, self._momentum, self._eps)
        y = F.hardswish(y)
        y_h, y_w = F.split(y, [h, w], axis=2)
        a_h = F.sigmoid(F.conv2d(y_h, self.h_kernel, self.h_bias))
        a_w = F.sigmoid(F.conv2d(y_w.transpose(0, 1, 3, 2), self.w_kernel, self.w_bias))
        return a_h, a_w

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        a_h, a_w = self.gates(x, training)
        return x * a_h * a_w


class Identity(Module):
    kind = "none"

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return x


def make_attention(
    kind: str,
    channels: int,
    k: int = 5,
    r: int = 16,
    include_background: bool = True,
    residual: bool = False,
    eca_k: int = 3,
    negative_slope: float = 0.1,
    conv_bias: bool = True,
    rng: RngStream | None = None,
    dtype=np.float64,
) -> Module:
    """Build one attention block by tag: none / se / eca / coord / fbca."""
    if kind in (None, "none"):
        return Identity()
    if kind == "fbca":
        return FBCA(channels, k=k, r=r, include_background=include_background, residual=residual,
                    negative_slope=negative_slope, conv_bias=conv_bias, rng=rng, dtype=dtype)
    if kind == "se":
        return SE(channels, r=r, rng=rng, dtype=dtype)
    if kind == "eca":
        return ECA(channels, k=eca_k, rng=rng, dtype=dtype)
    if kind == "coord":
        return CoordAttention(channels, r=r, rng=rng, dtype=dtype)
    raise ValueError(f"unknown attention kind {kind!r}; expected one of {KINDS}")


def param_count(block: Module) -> int:
    """Closed-form count of the block's serialized scalars.

    Batch-norm running mean and variance are part of the saved state and are
    counted alongside the learnable arrays; ``block.num_parameters()`` gives
    the learnable part alone.
    """
    if isinstance(block, Identity):
        return 0
    if isinstance(block, FBCA):
        c, k, hid = block.channels, block.k, block.channels // block.r
        conv = k * k * c + (1 if block.cblr.conv_bias is not None else 0)
        gate = c * hid + hid + hid * c + c
        gates = 2 * gate if block.include_background else gate
        return conv + 2 + 2 + gates
    if isinstance(block, SE):
        c = block._channels
        hid = block.gate.w1.shape[0]
        return 2 * c * hid + hid + c
    if isinstance(block, ECA):
        return block._k
    if isinstance(block, CoordAttention):
        c, m = block._channels, block._mip
        return (c * m + m) + 2 * m + 2 * m + 2 * (m * c + c)
    raise TypeError(f"not an attention block: {type(block).__name__}")


def mac_count(block: Module, h: int, w: int) -> int:
    """Analytic multiply-adds of conv2d/matmul/linear calls for one [1, C, H, W] input."""
    if isinstance(block, Identity):
        return 0
    if isinstance(block, FBCA):
        c, k, hid = block.channels, block.k, block.channels // block.r
        gates = 2 if block.include_background else 1
        return k * k * c * h * w + 2 * c * h * w + gates * 2 * c * hid
    if isinstance(block, SE):
        c = block._channels
        return 2 * c * block.gate.w1.shape[0]
    if isinstance(block, ECA):
        return block._k * block._channels
    if isinstance(block, CoordAttention):
        c, m = block._channels, block._mip
        return c * m * (h + w) + m * c * h + m * c * w
    raise TypeError(f"not an attention block: {type(block).__name__}")


# -- intermediate dumps ---------------------------------------------------


def write_pgm(path: str | Path, fmap: np.ndarray) -> None:
    """8-bit binary PGM of a map in [0, 1] (values x255, rounded half up)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 2:
        raise ValueError("PGM expects a 2-D map")
    pix = np.floor(np.clip(fmap, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def channel_rows(block_id: str, inter: FBCAIntermediates, sample: int = 0) -> list[tuple]:
    """Rows ``(block_id, channel, c_fore, c_back, d_w)`` for one sample."""
    cf = inter.c_fore.data[sample]
    cb = inter.c_back.data[sample] if inter.c_back is not None else np.full_like(cf, np.nan)
    dw = inter.d_w.data[sample]
    return [(block_id, ch, float(cf[ch]), float(cb[ch]), float(dw[ch])) for ch in range(cf.shape[0])]


def fbca_blocks(model: Module) -> list[tuple[str, FBCA]]:
    """Every FBCA site inside ``model`` with a dotted path name, in traversal order."""
    found = []

    def walk(mod: Module, prefix: str) -> None:
        for name, value in mod._children():
            if isinstance(value, FBCA):
                found.append((prefix + name, value))
            elif isinstance(value, Module):
                walk(value, f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, FBCA):
                        found.append((f"{prefix}{name}.{i}", item))
                    elif isinstance(item, Module):
                        walk(item, f"{prefix}{name}.{i}.")

    if isinstance(model, FBCA):
        return [("fbca", model)]
    walk(model, "")
    return found


def summarize_sites(sites: Sequence[tuple[str, FBCA]]) -> dict[str, float]:
    """Mean |d_w|, c_fore, c_back and (c_fore - c_back) over all sites' last forward."""
    dw, cf, cb, sep = [], [], [], []
    for _, blk in sites:
        inter = blk.last
        if inter is None or inter.d_w is None:
            continue
        dw.append(np.abs(inter.d_w.data).mean())
        cf.append(inter.c_fore.data.mean())
        if inter.c_back is not None:
            cb.append(inter.c_back.data.mean())
            sep.append((inter.c_fore.data - inter.c_back.data).mean())
    nan = float("nan")
    return {
        "mean_abs_dw": float(np.mean(dw)) if dw else nan,
        "mean_cf": float(np.mean(cf)) if cf else nan,
        "mean_cb": float(np.mean(cb)) if cb else nan,
        "separation": float(np.mean(sep)) if sep else nan,
    }
