"""Desk-scale instance segmentation lab.

A miniature two-stage detection/segmentation pipeline on synthetic shape
scenes, plus a switch-split mechanism that replaces the shared multi-class
mask head with independently trained per-class mask heads behind a
classifier-driven switch, and a COCO-convention evaluator for before/after
comparisons.
"""

__version__ = "0.1.0"

from splitmask.core import (
    BinaryMask,
    Box,
    BoxDelta,
    ClassDistribution,
    ClassLabel,
    Detection,
    GeometryError,
    MaskLogits,
    box_iou,
    decode_box_delta,
    encode_box_delta,
    mask_iou,
)
from splitmask.pipeline import PipelineConfig, PipelineModel, baseline_inference, roi_align
from splitmask.shapesynth import DatasetSpec, generate_split, split_validation_per_class
from splitmask.switch_split import (
    HeadRegistry,
    SwitchSplitModel,
    build_cascade,
    cascade_forward,
    route,
    surgery,
    switch_inference,
)
from splitmask.train import TrainConfig, train_all_heads, train_baseline, train_class_head

__all__ = [
    "BinaryMask",
    "Box",
    "BoxDelta",
    "ClassDistribution",
    "ClassLabel",
    "DatasetSpec",
    "Detection",
    "GeometryError",
    "HeadRegistry",
    "MaskLogits",
    "PipelineConfig",
    "PipelineModel",
    "SwitchSplitModel",
    "TrainConfig",
    "baseline_inference",
    "box_iou",
    "build_cascade",
    "cascade_forward",
    "decode_box_delta",
    "encode_box_delta",
    "generate_split",
    "mask_iou",
    "roi_align",
    "route",
    "split_validation_per_class",
    "surgery",
    "switch_inference",
    "train_all_heads",
    "train_baseline",
    "train_class_head",
]
