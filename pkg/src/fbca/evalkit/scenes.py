"""Synthetic low-light scenes: dark noisy background, dim elongated targets, bright round distractors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..numerics.rng import RngStream
from .metrics import Box


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    base: float = 0.06
    noise: float = 0.02
    # None: per-object intensity delta in [0.05, 0.15]; otherwise delta = contrast * (1 - base)
    contrast: float | None = None
    min_objects: int = 1
    max_objects: int = 4
    min_distractors: int = 0
    max_distractors: int = 6
    min_box_height: int = 16
    max_box_height: int = 28
    min_aspect: float = 2.0
    max_aspect: float = 3.0
    stride: int = 8
    max_retries: int = 100

    def __post_init__(self):
        if self.height % self.stride or self.width % self.stride:
            raise ValueError(f"image extents must be multiples of the head stride {self.stride}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 <= self.min_distractors <= self.max_distractors:
            raise ValueError("need 0 <= min_distractors <= max_distractors")
        if self.contrast is not None and self.contrast < 0:
            raise ValueError("contrast must be non-negative")


@dataclass
class ToyScene:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    boxes: list[Box]
    meta: dict = field(default_factory=dict)


def _overlaps(a: Box, b: Box, margin: float = 1.0) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (ax + aw + margin <= bx or bx + bw + margin <= ax or ay + ah + margin <= by or by + bh + margin <= ay)


def make_toy_scene(rng: RngStream, cfg: SceneConfig = SceneConfig()) -> ToyScene:
    h, w, s = cfg.height, cfg.width, cfg.stride
    noise = rng.normal(0.0, cfg.noise, size=(3, h, w))
    image = np.full((3, h, w), cfg.base) + noise
    yy, xx = np.mgrid[0:h, 0:w] + 0.5

    wanted = rng.integers(cfg.min_objects, cfg.max_objects + 1)
    boxes: list[Box] = []
    cells: set[tuple[int, int]] = set()
    deltas = []
    for _ in range(wanted):
        for _attempt in range(cfg.max_retries):
            bh = rng.integers(cfg.min_box_height, cfg.max_box_height + 1)
            aspect = rng.uniform(cfg.min_aspect, cfg.max_aspect)
            bw = max(3, int(round(bh / aspect)))
            bx = rng.integers(0, w - bw + 1)
            by = rng.integers(0, h - bh + 1)
            box = (float(bx), float(by), float(bw), float(bh))
            cell = (int((by + bh / 2) // s), int((bx + bw / 2) // s))
            if cell in cells or any(_overlaps(box, b) for b in boxes):
                continue
            boxes.append(box)
            cells.add(cell)
            break
        else:
            continue
        delta = rng.uniform(0.05, 0.15) if cfg.contrast is None else cfg.contrast * (1.0 - cfg.base)
        deltas.append(delta)
        cx, cy = bx + bw / 2.0, by + bh / 2.0
        inside = ((xx - cx) / (bw / 2.0)) ** 2 + ((yy - cy) / (bh / 2.0)) ** 2 <= 1.0
        image[:, inside] = cfg.base + delta + noise[:, inside]

    wanted_d = rng.integers(cfg.min_distractors, cfg.max_distractors + 1)
    placed_d = 0
    for _ in range(wanted_d):
        for _attempt in range(cfg.max_retries):
            rad = rng.uniform(2.0, 4.0)
            cx = rng.uniform(rad, w - rad)
            cy = rng.uniform(rad, h - rad)
            disc_box = (cx - rad, cy - rad, 2 * rad, 2 * rad)
            if any(_overlaps(disc_box, b) for b in boxes):
                continue
            level = rng.uniform(0.7, 1.0)
            disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad
            image[:, disc] = level + noise[:, disc]
            placed_d += 1
            break

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    meta = {
        "seed": rng.seed,
        "contrast": cfg.contrast,
        "deltas": deltas,
        "objects_requested": wanted,
        "objects_placed": len(boxes),
        "distractors_requested": wanted_d,
        "distractor_count": placed_d,
    }
    return ToyScene(image=image, boxes=boxes, meta=meta)


def make_dataset(seed: int, n: int, cfg: SceneConfig = SceneConfig()) -> list[ToyScene]:
    """``n`` scenes drawn sequentially from one stream seeded with ``seed``."""
    rng = RngStream(seed)
    return [make_toy_scene(rng, cfg) for _ in range(n)]


def dataset_hash(scenes: list[ToyScene]) -> str:
    h = hashlib.sha256()
    for sc in scenes:
        h.update(np.ascontiguousarray(sc.image, dtype="<f4").tobytes())
        h.update(json.dumps(sc.boxes).encode())
    return h.hexdigest()


def save_dataset(directory: str | Path, scenes: list[ToyScene], cfg: SceneConfig | None = None) -> Path:
    """Raw little-endian f32 blob per image plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        name = f"{i:05d}.f32"
        (directory / name).write_bytes(np.ascontiguousarray(sc.image, dtype="<f4").tobytes())
        entries.append({"file": name, "shape": list(sc.image.shape), "boxes": sc.boxes, "meta": sc.meta})
    index = {
        "format": "fbca-toy-scenes/1",
        "hash": dataset_hash(scenes),
        "config": asdict(cfg) if cfg is not None else None,
        "scenes": entries,
    }
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory: str | Path) -> list[ToyScene]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    scenes = []
    for e in index["scenes"]:
        img = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"]).astype(np.float32)
        scenes.append(ToyScene(image=img, boxes=[tuple(b) for b in e["boxes"]], meta=e["meta"]))
    if dataset_hash(scenes) != index["hash"]:
        raise ValueError(f"{directory}: dataset hash mismatch")
    return scenes
