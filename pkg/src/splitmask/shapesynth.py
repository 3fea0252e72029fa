"""Deterministic synthetic shape scenes with COCO-style annotations.

Every sample is a pure function of (master seed, split, sample index): each
sample owns a numpy PCG64 generator seeded with that triple, so two
processes generating the same split produce identical bytes. The per-sample
draw order is part of the determinism contract relied on by tests:

    1. instance count
    2. one class draw per instance
    3. background color
    4. per instance, per placement attempt: center x, center y, scale,
       angle, aspect, brightness jitter
    5. pixel noise field

Instances are depth-ordered first-drawn-in-front; annotation masks record
only visible pixels, and placements are rejection-sampled so every instance
keeps a visible core (occlusion on) or stays fully disjoint (occlusion off).
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from splitmask.core import Box, box_from_mask

SHAPE_NAMES = ("disk", "rectangle", "triangle", "ellipse", "ring")

# one base RGB color per shape class, index = class_id - 1
_CLASS_COLORS = np.array(
    [
        [0.80, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.80, 0.20],
        [0.80, 0.30, 0.80],
    ]
)

_SPLIT_CODES = {"train": 0, "val": 1}

_IMAGE_MAGIC = b"SSIM"
_IMAGE_VERSION = 1
_ANNOTATION_VERSION = 1

_PLACEMENT_ATTEMPTS = 60
_MIN_VISIBLE_FRACTION = 0.15


class DataError(Exception):
    """Base for dataset specification, generation, and file-format errors."""


class DatasetSpecError(DataError):
    pass


class GenerationError(DataError):
    pass


class AnnotationFormatError(DataError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """Configuration of a synthetic dataset.

    `rare_class=None` under-samples the last foreground class (mirroring a
    real-world low-sample category); pass 0 to disable the rare class.
    """

    num_classes: int = 5
    samples_per_split: dict = field(default_factory=lambda: {"train": 500, "val": 100})
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    scale_range: tuple = (2.5, 20.0)
    occlusion_allowed: bool = True
    rare_class: Optional[int] = None
    rare_class_weight: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPE_NAMES):
            raise DatasetSpecError(
                f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {self.num_classes}"
            )
        if self.min_instances < 0 or self.max_instances < self.min_instances:
            raise DatasetSpecError(
                f"bad instance count range [{self.min_instances}, {self.max_instances}]"
            )
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise DatasetSpecError(f"bad scale range {self.scale_range}")
        if hi * 3.2 >= self.image_size:
            raise DatasetSpecError(
                f"max scale {hi} too large for a {self.image_size}px canvas"
            )
        rc = self.resolved_rare_class
        if rc and not 1 <= rc <= self.num_classes:
            raise DatasetSpecError(f"rare_class {rc} outside class catalog")
        if not 0 < self.rare_class_weight <= 1:
            raise DatasetSpecError(f"rare_class_weight must be in (0, 1], got {self.rare_class_weight}")
        # crude capacity check: footprint of the smallest shapes must fit
        if self.max_instances * (2 * lo) ** 2 > 0.8 * self.image_size**2:
            raise DatasetSpecError(
                f"{self.max_instances} instances of scale >= {lo} cannot fit a "
                f"{self.image_size}px canvas"
            )

    @property
    def resolved_rare_class(self) -> int:
        """Rare class id; 0 means disabled."""
        if self.rare_class is None:
            return self.num_classes if self.num_classes >= 2 else 0
        return self.rare_class

    @property
    def class_names(self) -> tuple:
        return SHAPE_NAMES[: self.num_classes]

    def class_weights(self) -> np.ndarray:
        w = np.ones(self.num_classes)
        rc = self.resolved_rare_class
        if rc:
            w[rc - 1] *= self.rare_class_weight
        return w / w.sum()


@dataclass
class InstanceAnnotation:
    """One instance: foreground class, tight box, visible-pixel mask, pixel area."""

    class_id: int
    box: Box
    mask: np.ndarray  # (H, W) bool
    area: int


@dataclass
class SceneSample:
    sample_id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: list


def sample_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    """The per-sample generator; the (seed, split, index) triple is the whole state."""
    if split not in _SPLIT_CODES:
        raise DatasetSpecError(f"unknown split {split!r}, expected one of {sorted(_SPLIT_CODES)}")
    return np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])


def _pixel_grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys + 0.5, xs + 0.5  # pixel centers


def _rasterize(class_id: int, cx, cy, scale, angle, aspect, size: int) -> np.ndarray:
    ys, xs = _pixel_grid(size)
    dx, dy = xs - cx, ys - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    name = SHAPE_NAMES[class_id - 1]
    if name == "disk":
        return dx * dx + dy * dy <= scale * scale
    if name == "rectangle":
        return (np.abs(u) <= scale) & (np.abs(v) <= scale * aspect)
    if name == "triangle":
        # equilateral triangle of circumradius `scale`, rotated by `angle`
        verts = [
            (cx + scale * np.cos(angle + 2 * np.pi * k / 3),
             cy + scale * np.sin(angle + 2 * np.pi * k / 3))
            for k in range(3)
        ]
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            x0, y0 = verts[k]
            x1, y1 = verts[(k + 1) % 3]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside &= cross >= 0
        return inside
    if name == "ellipse":
        b = scale * aspect
        return (u / scale) ** 2 + (v / b) ** 2 <= 1.0
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= scale * scale) & (d2 >= (0.5 * scale) ** 2)
    raise DatasetSpecError(f"no rasterizer for class {class_id}")


def generate_sample(spec: DatasetSpec, split: str, index: int) -> SceneSample:
    """Generate one scene; deterministic in (spec.seed, split, index)."""
    rng = sample_rng(spec, split, index)
    size = spec.image_size
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    weights = spec.class_weights()
    classes = [1 + int(rng.choice(spec.num_classes, p=weights)) for _ in range(n)]
    background = rng.uniform(0.05, 0.20, size=3)

    occupied = np.zeros((size, size), dtype=bool)  # union of in-front instances
    placed = []  # (class_id, full_mask, visible_mask, brightness)
    for inst_idx, class_id in enumerate(classes):
        for attempt in range(_PLACEMENT_ATTEMPTS):
            margin = 1.5 * spec.scale_range[1]
            lo_m = min(margin, size / 2 - 1)
            cx = rng.uniform(lo_m, size - lo_m)
            cy = rng.uniform(lo_m, size - lo_m)
            scale = float(np.exp(rng.uniform(np.log(spec.scale_range[0]), np.log(spec.scale_range[1]))))
            angle = rng.uniform(0, np.pi)
            aspect = rng.uniform(0.45, 0.9)
            brightness = rng.uniform(-0.15, 0.15)
            full = _rasterize(class_id, cx, cy, scale, angle, aspect, size)
            full_count = int(np.count_nonzero(full))
            if full_count == 0:
                continue
            visible = full & ~occupied
            visible_count = int(np.count_nonzero(visible))
            if spec.occlusion_allowed:
                ok = visible_count >= max(8, _MIN_VISIBLE_FRACTION * full_count)
            else:
                ok = visible_count == full_count
            if ok:
                break
        else:
            raise GenerationError(
                f"could not place instance {inst_idx} (class {class_id}) in sample "
                f"{split}/{index} after {_PLACEMENT_ATTEMPTS} attempts; the spec asks "
                f"for more instances than fit the canvas"
            )
        occupied |= full
        placed.append((class_id, full, visible, brightness))

    noise = rng.normal(0.0, 0.02, size=(size, size, 3))

    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = background
    # render back-to-front: last-drawn instances sit behind earlier ones
    for class_id, full, _visible, brightness in reversed(placed):
        color = np.clip(_CLASS_COLORS[class_id - 1] + brightness, 0.0, 1.0)
        image[full] = color
    image = np.clip(image + noise, 0.0, 1.0).astype(np.float32)

    annotations = []
    for class_id, _full, visible, _brightness in placed:
        annotations.append(
            InstanceAnnotation(
                class_id=class_id,
                box=box_from_mask(visible),
                mask=visible,
                area=int(np.count_nonzero(visible)),
            )
        )
    return SceneSample(sample_id=index, image=image, annotations=annotations)


def generate_split(spec: DatasetSpec, split: str) -> list:
    """Generate all samples of a split."""
    if split not in _SPLIT_CODES:
        raise DatasetSpecError(f"unknown split {split!r}")
    count = spec.samples_per_split.get(split)
    if count is None:
        raise DatasetSpecError(f"spec carries no sample count for split {split!r}")
    return [generate_sample(spec, split, i) for i in range(count)]


def split_validation_per_class(samples: Sequence[SceneSample], class_id: int) -> list:
    """Sub-dataset validating one class: samples containing it, other-class
    annotations dropped. Warns (and returns empty) when the class never occurs."""
    if class_id < 1:
        raise ValueError(f"class {class_id} is not a foreground class")
    out = []
    for s in samples:
        kept = [a for a in s.annotations if a.class_id == class_id]
        if kept:
            out.append(SceneSample(sample_id=s.sample_id, image=s.image, annotations=kept))
    if not out:
        warnings.warn(f"class {class_id} absent from all {len(samples)} samples", RuntimeWarning)
    return out


# ---------------------------------------------------------------------------
# on-disk interchange
# ---------------------------------------------------------------------------


def _mask_to_rows(mask: np.ndarray) -> list:
    return ["".join("1" if v else "0" for v in row) for row in np.asarray(mask).astype(bool)]


def _mask_from_rows(rows: list, height: int, width: int) -> np.ndarray:
    if len(rows) != height:
        raise AnnotationFormatError(f"mask has {len(rows)} rows, header says {height}")
    out = np.empty((height, width), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != width or set(row) - {"0", "1"}:
            raise AnnotationFormatError(f"mask row {i} is not a {width}-char bit string")
        out[i] = np.frombuffer(row.encode("ascii"), dtype=np.uint8) == ord("1")
    return out


def write_image(image: np.ndarray, path: Path) -> None:
    image = np.ascontiguousarray(image, dtype=np.float32)
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIII", _IMAGE_MAGIC, _IMAGE_VERSION, h, w, c))
        f.write(image.tobytes())


def read_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, h, w, c = struct.unpack_from("<4sIIII", raw, 0)
    if magic != _IMAGE_MAGIC:
        raise AnnotationFormatError(f"{path}: bad image magic {magic!r}")
    if version != _IMAGE_VERSION:
        raise AnnotationFormatError(f"{path}: unsupported image container version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    if body.size != h * w * c:
        raise AnnotationFormatError(f"{path}: payload holds {body.size} floats, header says {h * w * c}")
    return body.reshape(h, w, c).copy()


def write_annotations(samples: Sequence[SceneSample], path) -> None:
    """Write a split to `path/annotations.json` plus one image container per sample."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    class_ids = sorted({a.class_id for s in samples for a in s.annotations})
    max_class = max(class_ids, default=0)
    num_classes = max(max_class, 1) if samples else 1
    doc = {
        "version": _ANNOTATION_VERSION,
        "categories": [
            {"id": i + 1, "name": SHAPE_NAMES[i] if i < len(SHAPE_NAMES) else f"class{i + 1}"}
            for i in range(num_classes)
        ],
        "images": [],
        "annotations": [],
    }
    ann_id = 1
    for s in samples:
        h, w = s.image.shape[:2]
        fname = f"images/{s.sample_id:06d}.img"
        doc["images"].append({"id": s.sample_id, "height": h, "width": w, "file": fname})
        write_image(s.image, root / fname)
        for a in s.annotations:
            doc["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": s.sample_id,
                    "category_id": a.class_id,
                    "bbox": [a.box.x1, a.box.y1, a.box.width, a.box.height],
                    "area": a.area,
                    "mask": {
                        "height": a.mask.shape[0],
                        "width": a.mask.shape[1],
                        "encoding": "bitgrid",
                        "rows": _mask_to_rows(a.mask),
                    },
                }
            )
            ann_id += 1
    (root / "annotations.json").write_text(json.dumps(doc))


def read_annotations(path) -> list:
    """Read a split written by :func:`write_annotations`."""
    root = Path(path)
    ann_file = root / "annotations.json"
    if not ann_file.exists():
        raise AnnotationFormatError(f"no annotations.json under {root}")
    try:
        doc = json.loads(ann_file.read_text())
    except json.JSONDecodeError as e:
        raise AnnotationFormatError(f"{ann_file}: not valid JSON ({e})") from e
    if doc.get("version") != _ANNOTATION_VERSION:
        raise AnnotationFormatError(f"{ann_file}: unsupported annotation version {doc.get('version')}")

    images = {}
    for rec in doc.get("images", []):
        try:
            images[rec["id"]] = SceneSample(
                sample_id=rec["id"],
                image=read_image(root / rec["file"]),
                annotations=[],
            )
        except KeyError as e:
            raise AnnotationFormatError(f"image record {rec!r}: missing field {e}") from e

    for rec in doc.get("annotations", []):
        try:
            img = images[rec["image_id"]]
            m = rec["mask"]
            mask = _mask_from_rows(m["rows"], m["height"], m["width"])
            x, y, w, h = rec["bbox"]
            img.annotations.append(
                InstanceAnnotation(
                    class_id=rec["category_id"],
                    box=Box(x, y, x + w, y + h),
                    mask=mask,
                    area=rec["area"],
                )
            )
        except KeyError as e:
            raise AnnotationFormatError(
                f"annotation record id={rec.get('id', '?')}: missing field {e}"
            ) from e
    return [images[k] for k in sorted(images)]


def dataset_digest(samples: Sequence[SceneSample]) -> str:
    """Content digest over pixels and annotations, for run comparability checks."""
    h = hashlib.sha256()
    for s in samples:
        h.update(struct.pack("<q", s.sample_id))
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        for a in s.annotations:
            h.update(struct.pack("<i", a.class_id))
            h.update(np.asarray(a.box.as_array(), dtype=np.float64).tobytes())
            h.update(np.packbits(a.mask).tobytes())
            h.update(struct.pack("<q", a.area))
    return h.hexdigest()


def per_class_instance_counts(samples: Sequence[SceneSample], num_classes: int) -> dict:
    counts = {c: 0 for c in range(1, num_classes + 1)}
    for s in samples:
        for a in s.annotations:
            counts[a.class_id] += 1
    return counts
