"""Toy detector: strided stem -> FBCsp neck -> single stride-8 head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..blocks import FBCsp, FBCspConfig, Neck, NeckConfig
from ..numerics.module import ConvBnAct, Module
from ..numerics.rng import RngStream
from ..numerics.tensor import Tensor
from .head import DetectionHead


@dataclass
class ModelConfig:
    stem_channels: list[int] = field(default_factory=lambda: [8, 16, 16, 16, 16])
    neck_channels: list[int] = field(default_factory=lambda: [16, 16, 16])
    use_neck: bool = True
    n_bottlenecks: int = 1
    hidden_ratio: float = 0.5
    fbca_pos1_k: int = 5
    fbca_pos3_k: int = 3
    r: int = 4
    eca_k: int = 3
    negative_slope: float = 0.1
    conv_bias: bool = True

    def __post_init__(self):
        need = 5 if self.use_neck else 3
        if len(self.stem_channels) != need:
            raise ValueError(f"stem_channels needs {need} entries (use_neck={self.use_neck})")
        if len(self.neck_channels) != 3:
            raise ValueError("neck_channels needs 3 entries")

    def fusion(self, attention_kind: str, include_background: bool, residual: bool) -> dict:
        return dict(
            n_bottlenecks=self.n_bottlenecks,
            hidden_ratio=self.hidden_ratio,
            fbca_pos1_k=self.fbca_pos1_k,
            fbca_pos3_k=self.fbca_pos3_k,
            attention_kind=attention_kind,
            include_background=include_background,
            residual=residual,
            r=self.r,
            eca_k=self.eca_k,
            negative_slope=self.negative_slope,
            conv_bias=self.conv_bias,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class ToyDetector(Module):
    def __init__(self, cfg: ModelConfig, attention_kind: str = "fbca", include_background: bool = True,
                 residual: bool = False, seed: int = 0, dtype=np.float64):
        rng = RngStream(seed)
        slope = cfg.negative_slope
        chans = [3] + list(cfg.stem_channels)
        self.stem = [
            ConvBnAct(chans[i], chans[i + 1], 3, stride=2, rng=rng, negative_slope=slope, conv_bias=cfg.conv_bias,
                      dtype=dtype)
            for i in range(len(cfg.stem_channels))
        ]
        fusion = cfg.fusion(attention_kind, include_background, residual)
        if cfg.use_neck:
            self.neck = Neck(NeckConfig(list(cfg.stem_channels[2:]), list(cfg.neck_channels), fusion), rng, dtype)
            self.fuse = None
        else:
            self.neck = None
            self.fuse = FBCsp(FBCspConfig(c_in=cfg.stem_channels[2], c_out=cfg.neck_channels[0], **fusion), rng, dtype)
        self.head = DetectionHead(cfg.neck_channels[0], rng=rng, negative_slope=slope, dtype=dtype)
        self._cfg = cfg
        self._dtype = np.dtype(dtype)

    @property
    def dtype(self):
        return self._dtype

    def features(self, images: Tensor, training: bool = False) -> list[Tensor]:
        feats = []
        x = images
        for layer in self.stem:
            x = layer(x, training)
            feats.append(x)
        return feats

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        feats = self.features(images, training)
        if self.neck is not None:
            f3, _, _ = self.neck(feats[2], feats[3], feats[4], training)
        else:
            f3 = self.fuse(feats[2], training)
        return self.head(f3, training)
