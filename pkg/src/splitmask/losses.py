"""Loss functions for the detection/segmentation heads.

Three losses drive training: categorical cross-entropy on the classifier
distribution, smooth L1 on box-regression residuals, and per-pixel binary
cross-entropy on mask probabilities. All operate on probabilities (not
logits) with logs guarded by a 1e-12 clamp, and accept either numpy arrays
or torch tensors; torch inputs stay in the autograd graph so analytic
gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from splitmask.core import Box

LOG_EPS = 1e-12


class LossInputError(ValueError):
    """Malformed loss inputs: bad labels, non-finite values, shape mismatches."""


@dataclass
class LossValue:
    """A reduced loss: scalar value, how it was reduced, and over how many elements.

    `value` is a torch scalar; it participates in autograd when the inputs did.
    """

    value: torch.Tensor
    reduction: str
    count: int

    def __post_init__(self):
        v = float(self.value.detach())
        if not np.isfinite(v):
            raise LossInputError(f"non-finite loss value {v}")
        if v < -1e-9:
            raise LossInputError(f"negative loss value {v}")

    def __float__(self) -> float:
        return float(self.value.detach())


def _as_tensor(x, name: str) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    if not torch.isfinite(t).all():
        raise LossInputError(f"non-finite entries in {name}")
    return t


def cls_cross_entropy(dist, truth: int) -> LossValue:
    """Cross-entropy of a class distribution against an integer true label.

    With a one-hot target this is -log(prob of the true class); the
    distribution covers background (index 0) plus the foreground classes.
    """
    d = _as_tensor(dist, "class distribution").reshape(-1)
    if not 0 <= truth < d.numel():
        raise LossInputError(f"label {truth} out of range for {d.numel()}-way distribution")
    p = d[truth].clamp(LOG_EPS, 1.0)
    return LossValue(value=-torch.log(p), reduction="sum", count=1)


def cross_entropy_batch(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p(true class) over a (M, K) probability batch."""
    picked = probs.double().gather(1, labels.view(-1, 1)).clamp(LOG_EPS, 1.0)
    return -torch.log(picked).mean()


def smooth_l1(x, reduction: str = "sum") -> LossValue:
    """Smooth L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise, reduced over elements."""
    t = _as_tensor(x, "smooth_l1 input").reshape(-1)
    a = t.abs()
    per_elem = torch.where(a < 1.0, 0.5 * t * t, a - 0.5)
    return LossValue(value=_reduce(per_elem, reduction), reduction=reduction, count=t.numel())


def _reduce(per_elem: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_elem.sum()
    if reduction == "mean":
        return per_elem.mean()
    raise LossInputError(f"unknown reduction {reduction!r}")


def _bce_elementwise(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # float64 internally: in float32 the 1e-12 clamp rounds to exactly 1.0,
    # and a saturated correct pixel would produce 0 * log(0) = nan
    p = pred.double().clamp(LOG_EPS, 1.0 - LOG_EPS)
    t = target.double()
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))


def mask_bce(pred, target, reduction: str = "sum") -> LossValue:
    """Pixel-wise binary cross-entropy between mask probabilities and a binary target."""
    p = _as_tensor(pred, "mask probabilities")
    t_np = np.asarray(target)
    if p.shape != t_np.shape:
        raise LossInputError(f"mask shape mismatch: pred {tuple(p.shape)} vs target {t_np.shape}")
    uniq = np.unique(t_np)
    if not np.all(np.isin(uniq, (0, 1))):
        raise LossInputError("mask target must be strictly binary")
    t = torch.as_tensor(t_np.astype(np.float64)).to(p.dtype)
    per_pixel = _bce_elementwise(p, t)
    return LossValue(value=_reduce(per_pixel, reduction), reduction=reduction, count=p.numel())


def mask_bce_batch(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mask BCE summed per instance, averaged over a (M, H, W) batch."""
    per_pixel = _bce_elementwise(pred, target)
    return per_pixel.flatten(1).sum(dim=1).mean()


def per_class_mask_target(
    roi_box: Box,
    gt_mask: np.ndarray,
    gt_class: int,
    head_class: int,
    resolution: int,
) -> np.ndarray:
    """Binary training target for a single-class head: the matched instance's
    ground-truth mask cropped to the ROI box and nearest-neighbor resampled.

    Raises when the matched instance belongs to a different class: per-class
    heads only ever see their own class's positives.
    """
    if gt_class != head_class:
        raise LossInputError(
            f"ROI matched to class {gt_class} but head owns class {head_class}"
        )
    return crop_mask_to_box(gt_mask, roi_box, resolution)


def crop_mask_to_box(mask: np.ndarray, box: Box, resolution: int) -> np.ndarray:
    """Nearest-neighbor resample of an image-resolution binary mask onto an
    MxM grid spanning `box`; sampling at cell centers keeps the target binary."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    ys = box.y1 + (np.arange(resolution) + 0.5) * box.height / resolution
    xs = box.x1 + (np.arange(resolution) + 0.5) * box.width / resolution
    rows = np.clip(np.floor(ys).astype(int), 0, h - 1)
    cols = np.clip(np.floor(xs).astype(int), 0, w - 1)
    return mask[np.ix_(rows, cols)]
