"""Cascade-DETR: box-constrained cascade attention and IoU-recalibrated scoring."""

from ._cascade_detr import (
    Box,
    CascadeDetr,
    CascadeDetrError,
    ModelConfig,
    evaluate_checkpoint,
    generate_synthetic,
    giou,
    hungarian,
    iou,
    load_checkpoint,
    rasterize_box,
    recalibrate,
    train,
    uniap,
)

__all__ = [
    "Box",
    "CascadeDetr",
    "CascadeDetrError",
    "ModelConfig",
    "evaluate_checkpoint",
    "generate_synthetic",
    "giou",
    "hungarian",
    "iou",
    "load_checkpoint",
    "rasterize_box",
    "recalibrate",
    "train",
    "uniap",
]
