"""Shared domain types and geometric primitives.

Boxes use the corner convention (x1, y1, x2, y2) in continuous pixel
coordinates with x1 < x2 and y1 < y2, matching COCO annotation semantics.
Masks and class distributions are plain numpy arrays: a binary mask is a
2-D bool array, mask logits are a 2-D float array, and a class
distribution is a 1-D float vector of length N+1 whose index 0 is the
background entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Array conventions used throughout the package.
BinaryMask = np.ndarray  # (H, W) bool
MaskLogits = np.ndarray  # (M, M) float
ClassDistribution = np.ndarray  # (N+1,) float, sums to 1, index 0 = background
ClassLabel = int  # 0 = background, 1..N = foreground


class GeometryError(ValueError):
    """Invalid geometry: degenerate boxes, mismatched mask shapes, non-finite deltas."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with corner coordinates, x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise GeometryError(f"non-finite box coordinates {self.as_tuple()}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise GeometryError(f"degenerate box {self.as_tuple()} (zero or negative extent)")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    def clipped(self, width: float, height: float, min_size: float = 1e-3) -> "Box":
        """Clip to [0, width] x [0, height], keeping a sliver of extent."""
        x1 = min(max(self.x1, 0.0), width - min_size)
        y1 = min(max(self.y1, 0.0), height - min_size)
        x2 = min(max(self.x2, x1 + min_size), width)
        y2 = min(max(self.y2, y1 + min_size), height)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxDelta:
    """Box regression offsets: center shifts normalized by reference size, log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise GeometryError(f"non-finite box delta ({self.dx}, {self.dy}, {self.dw}, {self.dh})")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass
class Detection:
    """One final per-instance prediction at image resolution.

    `mask` is the thresholded binary mask; `mask_prob` keeps the pasted
    probabilities (zero outside the box) for probability-level comparisons.
    """

    box: Box
    class_id: ClassLabel
    score: float
    mask: BinaryMask
    mask_prob: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"detection class must be foreground, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.mask.ndim != 2:
            raise ValueError("detection mask must be a 2-D array")


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N, 4) vs (M, 4) corner-form box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Pixel IoU of two equal-size binary masks; two empty masks count as 1.0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return inter / union


def encode_box_delta(target: Box, reference: Box) -> BoxDelta:
    """Express `target` relative to `reference` (center offsets, log size ratios)."""
    rcx, rcy = reference.center
    tcx, tcy = target.center
    return BoxDelta(
        dx=(tcx - rcx) / reference.width,
        dy=(tcy - rcy) / reference.height,
        dw=math.log(target.width / reference.width),
        dh=math.log(target.height / reference.height),
    )


def decode_box_delta(delta: BoxDelta, reference: Box) -> Box:
    """Inverse of :func:`encode_box_delta`."""
    rcx, rcy = reference.center
    cx = rcx + delta.dx * reference.width
    cy = rcy + delta.dy * reference.height
    w = reference.width * math.exp(delta.dw)
    h = reference.height * math.exp(delta.dh)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas(targets: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Vectorized encode for (N, 4) box arrays, returns (N, 4) deltas."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    r = np.asarray(references, dtype=np.float64).reshape(-1, 4)
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    tcx, tcy = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    rcx, rcy = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    return np.stack(
        [(tcx - rcx) / rw, (tcy - rcy) / rh, np.log(tw / rw), np.log(th / rh)], axis=1
    )


def decode_deltas(deltas: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Vectorized decode for (N, 4) delta arrays against (N, 4) reference boxes."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(d)):
        raise GeometryError("non-finite entries in box deltas")
    r = np.asarray(references, dtype=np.float64).reshape(-1, 4)
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    rcx, rcy = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    cx = rcx + d[:, 0] * rw
    cy = rcy + d[:, 1] * rh
    # exp is clamped so a wild regression output cannot overflow to inf
    w = rw * np.exp(np.clip(d[:, 2], -12.0, 12.0))
    h = rh * np.exp(np.clip(d[:, 3], -12.0, 12.0))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    identity = (d == 0.0).all(axis=1)  # zero deltas reproduce the reference exactly
    out[identity] = r[identity]
    return out


def box_from_mask(mask: BinaryMask) -> Box:
    """Tight corner-form bound of a non-empty mask (pixel (r, c) spans [c, c+1] x [r, r+1])."""
    mask = np.asarray(mask).astype(bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise GeometryError("cannot bound an empty mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def validate_distribution(dist: np.ndarray, atol: float = 1e-4) -> np.ndarray:
    """Check a class-distribution vector: 1-D, finite, non-negative, sums to ~1."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size < 2:
        raise ValueError(f"class distribution must be a 1-D vector of >= 2 entries, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise ValueError("class distribution contains non-finite entries")
    if np.any(dist < -1e-9):
        raise ValueError("class distribution contains negative entries")
    total = float(dist.sum())
    if abs(total - 1.0) > atol:
        raise ValueError(f"class distribution sums to {total}, expected 1")
    return dist


def argmax_lowest(values: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest index."""
    return int(np.argmax(np.asarray(values)))
