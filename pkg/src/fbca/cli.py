"""Command-line entry point: gradcheck, toy training/evaluation/ablation, attention costs and dumps.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import attention as att
from .checks import run_gradcheck_suite
from .evalkit.model import ModelConfig, ToyDetector
from .evalkit.scenes import SceneConfig, dataset_hash
from .evalkit.train import (
    ABLATION_KINDS,
    DataConfig,
    TrainConfig,
    TrainingDiverged,
    ablation_direction,
    evaluate,
    run_ablation,
    summarize_ablation,
    train,
    write_ablation,
)
from .numerics.counters import count_macs
from .numerics.module import Module
from .numerics.rng import RngStream
from .numerics.serialize import load_weights, save_weights
from .numerics.tensor import Tensor, no_grad

log = logging.getLogger("fbca")

COMMANDS = ("gradcheck", "train-toy", "eval-toy", "ablate", "bench-attn", "dump-attn")
PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


# -- config -------------------------------------------------------------------


@dataclass
class ArchConfig(ModelConfig):
    attention_kind: str = "fbca"
    include_background: bool = True
    residual: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.attention_kind not in att.KINDS:
            raise ValueError(f"attention_kind must be one of {att.KINDS}")

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 500
    batch_size: int = 8
    cosine: bool = False


@dataclass
class DataSection:
    n_train: int = 200
    n_test: int = 50
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(contrast=0.3, max_distractors=0))

    def data_config(self) -> DataConfig:
        return DataConfig(self.n_train, self.n_test, self.scene)


@dataclass
class GradcheckSection:
    n_seeds: int = 10
    h: float = 1e-5
    tol: float = 1e-4
    checks: list[str] | None = None  # None runs everything


@dataclass
class AblateSection:
    seeds: list[int] | None = None  # None: 5 seeds starting at the run seed
    kinds: list[str] = field(default_factory=lambda: list(ABLATION_KINDS))
    epochs: int | None = None  # None keeps train.epochs


@dataclass
class BenchSection:
    channels: int = 64
    height: int = 80
    width: int = 80
    k: int = 5
    r: int = 16
    eca_k: int = 3
    kinds: list[str] = field(default_factory=lambda: ["fbca", "se", "eca", "coord"])


@dataclass
class DumpSection:
    image_index: int = 0
    weights: str | None = None  # None: untrained model from the run seed
    symmetric: bool = False  # zero the activation-map convs and share gates before dumping


@dataclass
class RunConfig:
    seed: int = 42
    out: str = "runs"
    precision: str = "f64"
    model: ArchConfig = field(default_factory=ArchConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    data: DataSection = field(default_factory=DataSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    bench: BenchSection = field(default_factory=BenchSection)
    dump: DumpSection = field(default_factory=DumpSection)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(**asdict(self.train), seed=self.seed if seed is None else seed,
                           attention_kind=self.model.attention_kind,
                           include_background=self.model.include_background, residual=self.model.residual)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def _check_value(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _check_value(value, arg, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(hint)
        return [_check_value(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported config type {hint!r}")


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        key = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"unknown key {key!r}; allowed: {', '.join(names)}")
    kwargs = {k: _check_value(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Strict JSON -> RunConfig; unknown keys and wrong types are errors."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    cfg = _build(RunConfig, raw, "")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {cfg.precision!r}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    for kind in cfg.ablate.kinds:
        if kind not in ABLATION_KINDS:
            raise ConfigError(f"ablate.kinds: unknown kind {kind!r}; expected one of {ABLATION_KINDS}")
    for kind in cfg.bench.kinds:
        if kind not in att.KINDS:
            raise ConfigError(f"bench.kinds: unknown kind {kind!r}; expected one of {att.KINDS}")
    if cfg.data.n_train < 1 or cfg.data.n_test < 1:
        raise ConfigError("data: n_train and n_test must be positive")
    if cfg.gradcheck.n_seeds < 1:
        raise ConfigError("gradcheck.n_seeds must be positive")
    if not 1e-6 <= cfg.gradcheck.h <= 1e-4:
        raise ConfigError(f"gradcheck.h must lie in [1e-6, 1e-4], got {cfg.gradcheck.h}")


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


# -- helpers -----------------------------------------------------------------


def _write_csv(path: Path, header: tuple[str, ...], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    return repr(float(v))


def _datasets(cfg: RunConfig):
    train_scenes, test_scenes = cfg.data.data_config().datasets(cfg.seed)
    return train_scenes, test_scenes, dataset_hash(train_scenes + test_scenes)


def _build_model(cfg: RunConfig) -> ToyDetector:
    m = cfg.model
    return ToyDetector(m.model_config(), m.attention_kind, m.include_background, m.residual, seed=cfg.seed,
                       dtype=cfg.dtype)


def _load_trained(cfg: RunConfig, path: Path, expected_hash: str | None) -> ToyDetector:
    manifest = path.with_suffix(".json")
    if not manifest.exists() or not path.with_suffix(".bin").exists():
        raise ConfigError(f"weights file not found: {manifest}")
    state, meta = load_weights(manifest)
    if expected_hash is not None and meta.get("dataset_hash") != expected_hash:
        raise ConfigError(f"{manifest}: dataset hash mismatch (weights trained on {meta.get('dataset_hash')}, "
                          f"config and seed give {expected_hash})")
    if meta.get("precision", cfg.precision) != cfg.precision:
        raise ConfigError(f"{manifest}: weights are {meta['precision']}, run precision is {cfg.precision}")
    model = _build_model(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{manifest}: weights do not fit the configured model: {exc}") from exc
    return model


# -- commands -----------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> None:
    if cfg.precision != "f64":
        raise ConfigError("gradcheck requires f64 precision")
    gc = cfg.gradcheck
    seeds = [cfg.seed + i for i in range(gc.n_seeds)]
    results = run_gradcheck_suite(seeds, h=gc.h, tol=gc.tol, only=gc.checks)
    if not results:
        raise ConfigError(f"gradcheck.checks selected nothing: {gc.checks}")
    _write_csv(out / "gradcheck.csv", ("check", "seed", "max_rel_err", "coords", "kinks", "passed"),
               [(r.name, r.seed, _num(r.max_rel_err), r.coords, r.kinks, int(r.passed)) for r in results])
    failed = [r for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed, max rel err {worst:.3e} (tol {gc.tol:g})")
    for r in failed:
        print(f"FAIL {r.name} seed={r.seed} max_rel_err={r.max_rel_err:.3e} kinks={r.kinks}/{r.coords}")
    if failed:
        raise CheckFailed(f"{len(failed)} gradient checks failed")


def cmd_train_toy(cfg: RunConfig, out: Path, args) -> None:
    train_scenes, test_scenes, digest = _datasets(cfg)
    model = _build_model(cfg)
    tcfg = cfg.train_config()

    def progress(row: dict) -> None:
        log.info("epoch %d loss %.6f mr2 %.4f", row["epoch"], row["loss"], row["mr2"])

    try:
        res = train(model, train_scenes, test_scenes, tcfg, metrics_path=out / "metrics.csv", on_epoch=progress)
    except TrainingDiverged as exc:
        save_weights(exc.checkpoint, out / "weights_last_good", _weights_meta(cfg, digest, exc.epoch))
        raise CheckFailed(f"{exc}; last good weights (epoch {exc.epoch}) saved to weights_last_good.json") from exc
    save_weights(model.state_dict(), out / "weights", _weights_meta(cfg, digest, tcfg.epochs))
    print(f"train-toy: {tcfg.epochs} epochs, final loss {res.history[-1]['loss']:.6f}, "
          f"toy MR^-2 {res.final_mr2!r}")


def _weights_meta(cfg: RunConfig, digest: str, epoch: int) -> dict:
    return {"dataset_hash": digest, "seed": cfg.seed, "precision": cfg.precision, "epoch": epoch,
            "model": asdict(cfg.model)}


def cmd_eval_toy(cfg: RunConfig, out: Path, args) -> None:
    _, test_scenes, digest = _datasets(cfg)
    model = _load_trained(cfg, Path(args.weights or out / "weights"), digest)
    ev = evaluate(model, test_scenes)
    keys = ("mr2", "mean_abs_dw", "mean_cf", "mean_cb", "separation")
    _write_csv(out / "eval.csv", keys, [[_num(ev[k]) for k in keys]])
    print(f"eval-toy: toy MR^-2 {ev['mr2']!r}")


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    ab = cfg.ablate
    seeds = ab.seeds if ab.seeds is not None else [cfg.seed + i for i in range(5)]
    base = cfg.train_config()
    if ab.epochs is not None:
        base = dataclasses.replace(base, epochs=ab.epochs)
    rows = run_ablation(seeds, ab.kinds, cfg.model.model_config(), cfg.data.data_config(), base, jobs=args.jobs,
                        dtype=cfg.dtype)
    write_ablation(out / "ablation.csv", rows)
    summary = summarize_ablation(rows)
    print(f"{'kind':<10}{'mean MR^-2':>14}{'sd':>12}  seeds={len(seeds)}")
    for kind in ab.kinds:
        mean, sd = summary[kind]
        print(f"{kind:<10}{mean:>14.6f}{sd:>12.6f}")
    warnings = ablation_direction(summary)
    for w in warnings:
        log.warning("%s", w)
    if not warnings and "fbca" in summary:
        log.info("toy ordering matches the expected direction")


def _bench_block(kind: str, b: BenchSection) -> Module:
    return att.make_attention(kind, b.channels, k=b.k, r=b.r, eca_k=b.eca_k, rng=RngStream(0))


def cmd_bench_attn(cfg: RunConfig, out: Path, args) -> None:
    b = cfg.bench
    rows, mismatched = [], []
    x = Tensor(np.zeros((1, b.channels, b.height, b.width)))
    for kind in b.kinds:
        try:
            block = _bench_block(kind, b)
        except ValueError as exc:
            raise ConfigError(f"bench: {exc}") from exc
        analytic = att.mac_count(block, b.height, b.width)
        with no_grad(), count_macs() as box:
            block(x)
        counted = box[0]
        rows.append((kind, att.param_count(block), block.num_parameters(), analytic, counted))
        if analytic != counted:
            mismatched.append(kind)
    print(f"attention cost at C={b.channels} H={b.height} W={b.width} k={b.k} r={b.r}")
    print(f"{'kind':<8}{'params':>10}{'learnable':>11}{'MACs':>14}{'counted':>14}")
    for kind, params, learnable, analytic, counted in rows:
        print(f"{kind:<8}{params:>10}{learnable:>11}{analytic:>14}{counted:>14}")
    _write_csv(out / "bench.csv", ("kind", "params", "learnable", "macs", "counted_macs"), rows)

    model = _build_model(cfg)
    layers = []
    for name, value in model._children():
        if isinstance(value, Module):
            layers.append((name, value.num_parameters()))
        elif isinstance(value, list):
            layers += [(f"{name}.{i}", m.num_parameters()) for i, m in enumerate(value)]
    print("\ntoy detector layers")
    for name, n in layers:
        print(f"{name:<12}{n:>10}")
    print(f"{'total':<12}{model.num_parameters():>10}")
    _write_csv(out / "layers.csv", ("layer", "params"), layers + [("total", model.num_parameters())])
    if mismatched:
        raise CheckFailed(f"analytic and counted MACs differ for {', '.join(mismatched)}")


def _symmetrize(model: ToyDetector) -> None:
    """Zero every activation-map conv and give both gates the same weights, so d_w = 0 and maps are 1/2."""
    for _, site in att.fbca_blocks(model):
        site.cblr.kernel.data[...] = 0.0
        if site.cblr.conv_bias is not None:
            site.cblr.conv_bias.data[...] = 0.0
        site.cblr.bn_beta.data[...] = 0.0
        site.cblr.bn_running_mean[...] = 0.0
        if site.back_gate is not None:
            for pf, pb in zip(site.fore_gate.parameters(), site.back_gate.parameters()):
                pb.data[...] = pf.data


def cmd_dump_attn(cfg: RunConfig, out: Path, args) -> None:
    index = args.index if args.index is not None else cfg.dump.image_index
    _, test_scenes, digest = _datasets(cfg)
    if not 0 <= index < len(test_scenes):
        raise ConfigError(f"image index {index} out of range [0, {len(test_scenes)})")
    weights = args.weights or cfg.dump.weights
    model = _load_trained(cfg, Path(weights), digest) if weights else _build_model(cfg)
    if cfg.dump.symmetric:
        _symmetrize(model)
    sites = att.fbca_blocks(model)
    if not sites:
        raise ConfigError(f"model has no FBCA sites (attention_kind={cfg.model.attention_kind!r})")
    with no_grad():
        model(Tensor(test_scenes[index].image[None], dtype=cfg.dtype))
    dump_dir = out / "dump"
    dump_dir.mkdir(parents=True, exist_ok=True)
    for name, site in sites:
        inter = site.last
        att.write_pgm(dump_dir / f"{name}.fore.pgm", inter.f_map_fore.data[0, 0])
        _write_csv(dump_dir / f"{name}.channels.csv", ("block_id", "channel", "c_fore", "c_back", "d_w"),
                   [(b, c, _num(cf), _num(cb), _num(dw)) for b, c, cf, cb, dw in att.channel_rows(name, inter)])
    print(f"dump-attn: image {index}, {len(sites)} FBCA sites written to {dump_dir}")


HANDLERS = {
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "eval-toy": cmd_eval_toy,
    "ablate": cmd_ablate,
    "bench-attn": cmd_bench_attn,
    "dump-attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbca", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run config (defaults apply to omitted keys)")
    p.add_argument("--seed", type=int, help="run seed, overrides the config")
    p.add_argument("--out", type=Path, help="output directory, overrides the config")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for ablate")
    p.add_argument("--precision", choices=sorted(PRECISIONS), help="overrides the config")
    p.add_argument("--index", type=int, help="test image index for dump-attn")
    p.add_argument("--weights", type=Path, help="weights manifest for eval-toy / dump-attn")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            cfg = parse_config(text, str(args.config))
        else:
            text = None
            cfg = RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.precision is not None:
            cfg.precision = args.precision
        if args.out is not None:
            cfg.out = str(args.out)
        _validate(cfg)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        echo = out / f"{args.command}.config.json"
        echo.write_text(text if text is not None else config_to_json(cfg))
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"fbca: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"fbca: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
