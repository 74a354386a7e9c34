"""FBCsp fusion block and a three-level top-down/bottom-up neck built from it.

FBCsp layout (attention sites marked *):

    x -> cv1 (1x1) -> *att1 -> [3x3 pair + shortcut] x n --+
    x -> cv2 (1x1) ----------------------------------------+-> concat -> cv3 (1x1) -> *att3
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import make_attention
from .numerics import functional as F
from .numerics.module import ConvBnAct, Module
from .numerics.rng import RngStream
from .numerics.tensor import Tensor


@dataclass
class FBCspConfig:
    c_in: int
    c_out: int
    n_bottlenecks: int = 1
    hidden_ratio: float = 0.5
    fbca_pos1_k: int = 5
    fbca_pos3_k: int = 3
    attention_kind: str = "fbca"
    include_background: bool = True
    residual: bool = False
    r: int = 16
    eca_k: int = 3
    negative_slope: float = 0.1
    conv_bias: bool = True

    def __post_init__(self):
        if self.n_bottlenecks < 0:
            raise ValueError("n_bottlenecks must be >= 0")
        if not 0.0 < self.hidden_ratio <= 1.0:
            raise ValueError("hidden_ratio must lie in (0, 1]")
        if self.fbca_pos1_k % 2 == 0 or self.fbca_pos3_k % 2 == 0:
            raise ValueError("FBCA kernel sizes must be odd")
        if self.hidden < 1:
            raise ValueError("hidden channel count rounds to zero")

    @property
    def hidden(self) -> int:
        return int(round(self.c_out * self.hidden_ratio))


class Bottleneck(Module):
    """Two 3x3 ConvBnAct with an additive shortcut."""

    def __init__(self, channels: int, rng: RngStream, negative_slope: float = 0.1, conv_bias: bool = True,
                 dtype=np.float64):
        self.cv1 = ConvBnAct(channels, channels, 3, rng=rng, negative_slope=negative_slope, conv_bias=conv_bias,
                             dtype=dtype)
        self.cv2 = ConvBnAct(channels, channels, 3, rng=rng, negative_slope=negative_slope, conv_bias=conv_bias,
                             dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return x + self.cv2(self.cv1(x, training), training)


class FBCsp(Module):
    def __init__(self, cfg: FBCspConfig, rng: RngStream | None = None, dtype=np.float64):
        rng = rng or RngStream(0)
        hid = cfg.hidden
        conv = dict(rng=rng, negative_slope=cfg.negative_slope, conv_bias=cfg.conv_bias, dtype=dtype)
        att = dict(r=cfg.r, include_background=cfg.include_background, residual=cfg.residual, eca_k=cfg.eca_k,
                   negative_slope=cfg.negative_slope, conv_bias=cfg.conv_bias, rng=rng, dtype=dtype)
        self.cv1 = ConvBnAct(cfg.c_in, hid, 1, **conv)
        self.cv2 = ConvBnAct(cfg.c_in, hid, 1, **conv)
        self.att1 = make_attention(cfg.attention_kind, hid, k=cfg.fbca_pos1_k, **att)
        self.bottlenecks = [Bottleneck(hid, **conv) for _ in range(cfg.n_bottlenecks)]
        self.cv3 = ConvBnAct(2 * hid, cfg.c_out, 1, **conv)
        self.att3 = make_attention(cfg.attention_kind, cfg.c_out, k=cfg.fbca_pos3_k, **att)
        self._cfg = cfg

    @property
    def cfg(self) -> FBCspConfig:
        return self._cfg

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self._cfg.c_in:
            raise ValueError(f"FBCsp expects [N, {self._cfg.c_in}, H, W], got {x.shape}")
        a = self.att1(self.cv1(x, training), training)
        for blk in self.bottlenecks:
            a = blk(a, training)
        b = self.cv2(x, training)
        return self.att3(self.cv3(F.concat_channels([a, b]), training), training)


def fbcsp_forward(x: Tensor, block: FBCsp, training: bool = False) -> Tensor:
    return block(x, training)


class Downsample(Module):
    """3x3 stride-2 ConvBnAct."""

    def __init__(self, c_in: int, c_out: int, rng: RngStream | None = None, negative_slope: float = 0.1,
                 conv_bias: bool = True, dtype=np.float64):
        self.conv = ConvBnAct(c_in, c_out, 3, stride=2, rng=rng, negative_slope=negative_slope,
                              conv_bias=conv_bias, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"downsample needs even spatial extents, got {x.shape[2:]}")
        return self.conv(x, training)


def upsample(x: Tensor) -> Tensor:
    return F.nearest_upsample2x(x)


@dataclass
class NeckConfig:
    in_channels: list[int]
    out_channels: list[int]
    fusion: dict = field(default_factory=dict)  # FBCspConfig fields shared by all four fusions

    def __post_init__(self):
        if len(self.in_channels) != 3 or len(self.out_channels) != 3:
            raise ValueError("the neck has exactly three levels")
        bad = set(self.fusion) - (set(FBCspConfig.__dataclass_fields__) - {"c_in", "c_out"})
        if bad:
            raise ValueError(f"unknown fusion keys: {sorted(bad)}")

    def fusion_cfg(self, c_in: int, c_out: int) -> FBCspConfig:
        return FBCspConfig(c_in=c_in, c_out=c_out, **self.fusion)

    def to_dict(self) -> dict:
        return asdict(self)


class Neck(Module):
    """PAN-style fusion: top-down to stride 8, then bottom-up to stride 32, FBCsp at all four merges."""

    def __init__(self, cfg: NeckConfig, rng: RngStream | None = None, dtype=np.float64):
        rng = rng or RngStream(0)
        c3, c4, c5 = cfg.in_channels
        o3, o4, o5 = cfg.out_channels
        slope = cfg.fusion.get("negative_slope", 0.1)
        bias = cfg.fusion.get("conv_bias", True)
        self.td4 = FBCsp(cfg.fusion_cfg(c5 + c4, o4), rng, dtype)
        self.td3 = FBCsp(cfg.fusion_cfg(o4 + c3, o3), rng, dtype)
        self.down3 = Downsample(o3, o3, rng, slope, bias, dtype)
        self.bu4 = FBCsp(cfg.fusion_cfg(o3 + o4, o4), rng, dtype)
        self.down4 = Downsample(o4, o4, rng, slope, bias, dtype)
        self.bu5 = FBCsp(cfg.fusion_cfg(o4 + c5, o5), rng, dtype)
        self._cfg = cfg

    def forward(self, f3: Tensor, f4: Tensor, f5: Tensor, training: bool = False) -> tuple[Tensor, Tensor, Tensor]:
        h3, w3 = f3.shape[2:]
        if f4.shape[2:] != (h3 // 2, w3 // 2) or f5.shape[2:] != (h3 // 4, w3 // 4) or h3 % 4 or w3 % 4:
            raise ValueError(f"neck inputs must follow a 4:2:1 pyramid, got {f3.shape[2:]}, {f4.shape[2:]}, "
                             f"{f5.shape[2:]}")
        p4 = self.td4(F.concat_channels([upsample(f5), f4]), training)
        p3 = self.td3(F.concat_channels([upsample(p4), f3]), training)
        n4 = self.bu4(F.concat_channels([self.down3(p3, training), p4]), training)
        n5 = self.bu5(F.concat_channels([self.down4(n4, training), f5]), training)
        return p3, n4, n5


def neck_forward(f3: Tensor, f4: Tensor, f5: Tensor, neck: Neck, training: bool = False):
    return neck(f3, f4, f5, training)
