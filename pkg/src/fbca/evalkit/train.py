"""SGDW training on toy scenes, toy evaluation and the attention ablation sweep."""

from __future__ import annotations

import csv
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..attention import fbca_blocks, summarize_sites
from ..numerics.rng import RngStream
from ..numerics.tensor import NonFiniteError, Tensor, no_grad
from .head import STRIDE, build_targets, decode, head_loss
from .metrics import DetectionRecord, mr2
from .model import ModelConfig, ToyDetector
from .scenes import SceneConfig, ToyScene, make_dataset

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "loss", "mr2", "mean_abs_dw", "mean_cf", "mean_cb")
ABLATION_KINDS = ("none", "se", "eca", "coord", "fbca_nob", "fbca")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 500
    batch_size: int = 8
    seed: int = 42
    attention_kind: str = "fbca"
    include_background: bool = True
    residual: bool = False
    cosine: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class DataConfig:
    n_train: int = 200
    n_test: int = 50
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(contrast=0.3, max_distractors=0))

    def datasets(self, seed: int) -> tuple[list[ToyScene], list[ToyScene]]:
        """Train and test scenes from two independent streams derived from ``seed``."""
        return make_dataset(seed, self.n_train, self.scene), make_dataset(seed ^ 0x5EED5EED, self.n_test, self.scene)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: dict[str, np.ndarray], epoch: int):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.epoch = epoch


class SGDW:
    """SGD with momentum and decoupled weight decay (applied to weights of ndim > 1)."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr_scale: float = 1.0) -> None:
        lr = self.lr * lr_scale
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            if self.weight_decay and p.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _batch(scenes: Sequence[ToyScene], dtype) -> tuple[Tensor, list]:
    images = Tensor(np.stack([s.image for s in scenes]), dtype=dtype)
    return images, [s.boxes for s in scenes]


def compute_loss(model: ToyDetector, scenes: Sequence[ToyScene], training: bool) -> Tensor:
    images, boxes = _batch(scenes, model.dtype)
    pred = model(images, training)
    obj, reg, mask = build_targets(boxes, pred.shape[2:], STRIDE, dtype=model.dtype)
    return head_loss(pred, obj, reg, mask)


def evaluate(model: ToyDetector, scenes: Sequence[ToyScene], batch_size: int = 64) -> dict[str, float]:
    """Eval-mode toy MR^-2 plus FBCA channel statistics averaged over batches."""
    records = []
    stats: list[dict[str, float]] = []
    sites = fbca_blocks(model)
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            images, boxes = _batch(chunk, model.dtype)
            pred = model(images, training=False)
            for dets, gts in zip(decode(pred.data), boxes):
                records.append(DetectionRecord(dets, list(gts)))
            if sites:
                stats.append(summarize_sites(sites))
    out = {"mr2": mr2(records)}
    for key in ("mean_abs_dw", "mean_cf", "mean_cb", "separation"):
        vals = [s[key] for s in stats if not math.isnan(s[key])]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    return out


@dataclass
class TrainResult:
    model: ToyDetector
    history: list[dict[str, float]]
    separation: list[float]

    @property
    def final_mr2(self) -> float:
        return self.history[-1]["mr2"]


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, dtype=np.float64) -> ToyDetector:
    return ToyDetector(model_cfg, cfg.attention_kind, cfg.include_background, cfg.residual, seed=cfg.seed,
                       dtype=dtype)


def train(
    model: ToyDetector,
    train_scenes: Sequence[ToyScene],
    test_scenes: Sequence[ToyScene],
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run SGDW for ``cfg.epochs`` epochs.

    Row 0 of the history evaluates the initial weights (its loss is the
    eval-mode loss on the training set); rows 1.. hold the mean training-mode
    batch loss of that epoch and the eval-mode toy metrics afterwards.
    """
    rng = RngStream(cfg.seed ^ 0xBA7C4)
    opt = SGDW(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    n = len(train_scenes)
    history: list[dict[str, float]] = []
    separation: list[float] = []

    def record(epoch: int, loss: float) -> None:
        ev = evaluate(model, test_scenes)
        row = {"epoch": epoch, "loss": loss, "mr2": ev["mr2"], "mean_abs_dw": ev["mean_abs_dw"],
               "mean_cf": ev["mean_cf"], "mean_cb": ev["mean_cb"]}
        history.append(row)
        separation.append(ev["separation"])
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d loss %.6f mr2 %.4f", epoch, loss, ev["mr2"])

    with no_grad():
        init_losses = [compute_loss(model, train_scenes[i:i + cfg.batch_size], False).item()
                       for i in range(0, n, cfg.batch_size)]
    record(0, float(np.mean(init_losses)))
    checkpoint = model.state_dict()
    checkpoint = {k: v.copy() for k, v in checkpoint.items()}

    for epoch in range(1, cfg.epochs + 1):
        scale = 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs)) if cfg.cosine else 1.0
        perm = rng.permutation(n)
        losses = []
        try:
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch-norm needs two samples
                loss = compute_loss(model, [train_scenes[i] for i in idx], True)
                opt.zero_grad()
                loss.backward()
                opt.step(scale)
                losses.append(loss.item())
            for p in model.parameters():
                if not np.isfinite(p.data).all():
                    raise NonFiniteError("parameters became non-finite")
        except NonFiniteError as exc:
            model.load_state_dict(checkpoint)
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", checkpoint, epoch - 1) from exc
        record(epoch, float(np.mean(losses)))
        checkpoint = {k: v.copy() for k, v in model.state_dict().items()}

    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return TrainResult(model, history, separation)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def kind_flags(kind: str) -> tuple[str, bool]:
    """Ablation tag -> (attention_kind, include_background)."""
    if kind == "fbca_nob":
        return "fbca", False
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    return kind, True


def run_one(kind: str, seed: int, model_cfg: ModelConfig, data_cfg: DataConfig, base: TrainConfig,
            datasets=None, dtype=np.float64) -> TrainResult:
    attention_kind, include_background = kind_flags(kind)
    cfg = TrainConfig(**{**asdict(base), "seed": seed, "attention_kind": attention_kind,
                         "include_background": include_background})
    train_scenes, test_scenes = datasets if datasets is not None else data_cfg.datasets(seed)
    model = build_model(model_cfg, cfg, dtype)
    return train(model, train_scenes, test_scenes, cfg)


def _run_job(args):
    kind, seed, model_cfg, data_cfg, base, dtype = args
    return kind, seed, run_one(kind, seed, model_cfg, data_cfg, base, dtype=dtype).final_mr2


def run_ablation(
    seeds: Sequence[int],
    kinds: Sequence[str],
    model_cfg: ModelConfig,
    data_cfg: DataConfig,
    base: TrainConfig,
    jobs: int = 1,
    dtype=np.float64,
) -> list[tuple[str, int, float]]:
    """Final toy MR^-2 for every (kind, seed); rows ordered kind-major as given.

    With ``jobs > 1`` seeds run in worker processes; results are re-ordered, so
    output does not depend on the worker count.
    """
    for k in kinds:
        kind_flags(k)
    tasks = [(k, s, model_cfg, data_cfg, base, dtype) for k in kinds for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, tasks))
    else:
        cache: dict[int, tuple] = {}
        results = []
        for k, s, *_ in tasks:
            if s not in cache:
                cache[s] = data_cfg.datasets(s)
            res = run_one(k, s, model_cfg, data_cfg, base, datasets=cache[s], dtype=dtype)
            results.append((k, s, res.final_mr2))
    return results


def summarize_ablation(rows: Sequence[tuple[str, int, float]]) -> dict[str, tuple[float, float]]:
    """kind -> (mean, sample sd) of MR^-2 over seeds."""
    by_kind: dict[str, list[float]] = {}
    for kind, _, value in rows:
        by_kind.setdefault(kind, []).append(value)
    return {k: (statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0) for k, v in by_kind.items()}


def ablation_direction(summary: dict[str, tuple[float, float]]) -> list[str]:
    """Warnings where the toy ordering departs from FBCA <= FBCA without background and FBCA <= no attention."""
    warnings = []
    if "fbca" in summary:
        ours = summary["fbca"][0]
        for other, label in (("fbca_nob", "FBCA without background vector"), ("none", "no attention")):
            if other in summary and ours > summary[other][0]:
                warnings.append(f"toy MR^-2 of FBCA ({ours:.4f}) exceeds {label} ({summary[other][0]:.4f})")
    return warnings


def write_ablation(path: str | Path, rows: Sequence[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kind", "seed", "mr2"))
        for kind, seed, value in rows:
            w.writerow((kind, seed, repr(float(value))))
