"""Desk-scale detection harness: toy scenes, a stride-8 head, SGDW training and MR^-2."""

from .baseline import threshold_detect
from .head import DetectionHead, build_targets, decode, head_forward, head_loss
from .metrics import DetectionRecord, iou, match_detections, miss_rate_curve, mr2, nms
from .model import ModelConfig, ToyDetector
from .scenes import SceneConfig, ToyScene, dataset_hash, load_dataset, make_dataset, make_toy_scene, save_dataset
from .train import (
    ABLATION_KINDS,
    SGDW,
    DataConfig,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    run_ablation,
    summarize_ablation,
    train,
)

__all__ = [
    "ABLATION_KINDS",
    "DataConfig",
    "DetectionHead",
    "DetectionRecord",
    "ModelConfig",
    "SGDW",
    "SceneConfig",
    "ToyDetector",
    "ToyScene",
    "TrainConfig",
    "TrainingDiverged",
    "build_targets",
    "dataset_hash",
    "decode",
    "evaluate",
    "head_forward",
    "head_loss",
    "iou",
    "load_dataset",
    "make_dataset",
    "make_toy_scene",
    "match_detections",
    "miss_rate_curve",
    "mr2",
    "nms",
    "run_ablation",
    "save_dataset",
    "summarize_ablation",
    "threshold_detect",
    "train",
]
