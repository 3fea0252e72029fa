"""Miniature two-stage detection pipeline.

A small conv backbone produces a single-level feature map; proposals come
either from a learned anchor head or from jittered ground-truth boxes (a
training accelerant that decouples head experiments from proposal quality).
ROI features are extracted with quantization-free bilinear ROI alignment,
then classified, box-refined, and masked. Inference is sequential: masks
are always predicted from ROIs re-aligned on the refined boxes, for both
the shared multi-class mask head and the per-class heads built on top.

Every trainable parameter belongs to exactly one sub-head in
{backbone, proposal, cls, box, mask}; checkpointing and the freeze/isolation
tests rely on that tagging via :func:`flat_params`.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from splitmask.core import Box, Detection, argmax_lowest, box_iou_matrix, decode_deltas


class PipelineError(RuntimeError):
    """Incompatible inputs or model configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    num_classes: int = 5
    image_size: int = 128
    stride: int = 4
    channels: int = 32
    head_hidden: int = 128
    mask_channels: int = 16
    mask_resolution: int = 28
    roi_size_box: int = 7
    roi_size_mask: int = 14
    anchor_scales: tuple = (12.0, 24.0, 48.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    proposal_nms_iou: float = 0.7
    detection_nms_iou: float = 0.5
    proposal_count: int = 32
    jitter_amplitude: float = 0.10

    def __post_init__(self):
        if self.image_size % self.stride != 0:
            raise PipelineError(f"stride {self.stride} does not divide image size {self.image_size}")
        if self.stride & (self.stride - 1):
            raise PipelineError(f"stride must be a power of two, got {self.stride}")
        if self.mask_resolution != 2 * self.roi_size_mask:
            raise PipelineError("mask head upsamples 2x, so mask_resolution must be 2 * roi_size_mask")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)


@dataclass
class FeatureMap:
    """Single-level backbone output: (C, H/stride, W/stride) activations."""

    tensor: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.tensor.ndim != 3:
            raise PipelineError(f"feature map must be (C, H, W), got shape {tuple(self.tensor.shape)}")

    @property
    def image_height(self) -> int:
        return self.tensor.shape[1] * self.stride

    @property
    def image_width(self) -> int:
        return self.tensor.shape[2] * self.stride


@dataclass
class RoiFeature:
    """Fixed-resolution feature crop for one ROI."""

    features: torch.Tensor  # (C, R, R)
    box: Box
    sample_id: Optional[int] = None


def _init_layers(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic He init for the ReLU stacks, driven by an explicit generator."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(layer.weight, a=0.0, nonlinearity="relu", generator=generator)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def _init_predictor(layer: nn.Module, generator: torch.Generator, std: float = 0.01) -> None:
    nn.init.normal_(layer.weight, mean=0.0, std=std, generator=generator)
    nn.init.zeros_(layer.bias)


class Backbone(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        downs = int(math.log2(cfg.stride))
        widths = [3] + [max(16, cfg.channels // 2)] * (downs - 1) + [cfg.channels]
        for i in range(downs):
            self.add_module(f"down{i + 1}", nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.conv1 = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for name, layer in self.named_children():
            x = torch.relu(layer(x))
        return x


class RpnHead(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        a = cfg.num_anchors_per_cell
        self.conv = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)
        self.objectness = nn.Conv2d(cfg.channels, a, 1)
        self.deltas = nn.Conv2d(cfg.channels, 4 * a, 1)

    def forward(self, fm: torch.Tensor):
        h = torch.relu(self.conv(fm))
        return self.objectness(h), self.deltas(h)


class ClsHead(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        in_dim = cfg.channels * cfg.roi_size_box**2
        self.fc1 = nn.Linear(in_dim, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.head_hidden)
        self.out = nn.Linear(cfg.head_hidden, cfg.num_classes + 1)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.fc1(rois.flatten(1)))
        h = torch.relu(self.fc2(h))
        return torch.softmax(self.out(h), dim=1)


class BoxHead(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        in_dim = cfg.channels * cfg.roi_size_box**2
        self.num_classes = cfg.num_classes
        self.fc1 = nn.Linear(in_dim, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.head_hidden)
        self.out = nn.Linear(cfg.head_hidden, 4 * cfg.num_classes)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.fc1(rois.flatten(1)))
        h = torch.relu(self.fc2(h))
        return self.out(h).view(-1, self.num_classes, 4)


class MaskTrunk(nn.Module):
    """Shared structure of every mask head: two convs plus a 2x deconv."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        cm = cfg.mask_channels
        self.conv1 = nn.Conv2d(cfg.channels, cm, 3, padding=1)
        self.conv2 = nn.Conv2d(cm, cm, 3, padding=1)
        self.up = nn.ConvTranspose2d(cm, cm, 2, stride=2)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(rois))
        h = torch.relu(self.conv2(h))
        return torch.relu(self.up(h))


class MultiClassMaskHead(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.trunk = MaskTrunk(cfg)
        self.logits = nn.Conv2d(cfg.mask_channels, cfg.num_classes, 1)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        return self.logits(self.trunk(rois))


SUBHEAD_NAMES = ("backbone", "proposal", "cls", "box", "mask")


class PipelineModel(nn.Module):
    """Baseline model with a shared multi-class mask head."""

    def __init__(self, config: PipelineConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        self.backbone = Backbone(config)
        self.proposal = RpnHead(config)
        self.cls = ClsHead(config)
        self.box = BoxHead(config)
        self.mask = MultiClassMaskHead(config)
        for sub in (self.backbone, self.proposal, self.cls, self.box, self.mask):
            _init_layers(sub, g)
        _init_predictor(self.cls.out, g, std=0.01)
        _init_predictor(self.box.out, g, std=0.001)
        _init_predictor(self.mask.logits, g, std=0.01)

    def subheads(self) -> dict:
        return {name: getattr(self, name) for name in SUBHEAD_NAMES}

    def backbone_forward(self, image: np.ndarray) -> FeatureMap:
        t = image_to_tensor(image, self.config)
        with torch.no_grad():
            fm = self.backbone(t.unsqueeze(0))[0]
        if not torch.isfinite(fm).all():
            raise PipelineError("backbone produced non-finite activations")
        return FeatureMap(tensor=fm, stride=self.config.stride)


def image_to_tensor(image: np.ndarray, config: PipelineConfig) -> torch.Tensor:
    image = np.asarray(image)
    if image.shape != (config.image_size, config.image_size, 3):
        raise PipelineError(
            f"image shape {image.shape} does not match configured "
            f"{(config.image_size, config.image_size, 3)}"
        )
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))


def flat_params(model: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Stable hierarchical naming: subhead/layer/tensor (dots become slashes)."""
    out = OrderedDict()
    for name, p in model.named_parameters():
        out[prefix + name.replace(".", "/")] = p
    return out


# ---------------------------------------------------------------------------
# ROI alignment
# ---------------------------------------------------------------------------


def roi_align(fm: FeatureMap, boxes, out_res: int) -> torch.Tensor:
    """Quantization-free ROI alignment.

    Each output cell averages 2x2 bilinear samples taken at the cell's
    quarter points; continuous image coordinate c maps to feature index
    c/stride - 0.5 (pixel centers sit at half-integer coordinates), with
    coordinates clamped at the map border. Linear in the feature map.
    """
    t = fm.tensor
    _, fh, fw = t.shape
    b = _boxes_to_array(boxes)
    if b.size == 0:
        return torch.zeros((0, t.shape[0], out_res, out_res), dtype=t.dtype)
    ih, iw = fm.image_height, fm.image_width
    eps = 1e-6
    if (
        np.any(b[:, 0] < -eps)
        or np.any(b[:, 1] < -eps)
        or np.any(b[:, 2] > iw + eps)
        or np.any(b[:, 3] > ih + eps)
    ):
        raise PipelineError("ROI box outside image bounds")
    fb = b / fm.stride
    n_samp = 2 * out_res
    pos = (np.arange(n_samp) + 0.5) / n_samp
    xs = fb[:, 0:1] + pos[None, :] * (fb[:, 2:3] - fb[:, 0:1]) - 0.5
    ys = fb[:, 1:2] + pos[None, :] * (fb[:, 3:4] - fb[:, 1:2]) - 0.5
    xs = np.clip(xs, 0.0, fw - 1)
    ys = np.clip(ys, 0.0, fh - 1)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, fw - 1)
    y1 = np.minimum(y0 + 1, fh - 1)
    wx = torch.from_numpy((xs - x0).astype(np.float32))
    wy = torch.from_numpy((ys - y0).astype(np.float32))

    x0t, x1t = torch.from_numpy(x0), torch.from_numpy(x1)
    y0t, y1t = torch.from_numpy(y0), torch.from_numpy(y1)
    m = b.shape[0]
    Y0 = y0t[:, :, None].expand(m, n_samp, n_samp)
    Y1 = y1t[:, :, None].expand(m, n_samp, n_samp)
    X0 = x0t[:, None, :].expand(m, n_samp, n_samp)
    X1 = x1t[:, None, :].expand(m, n_samp, n_samp)
    WY = wy[:, :, None]
    WX = wx[:, None, :]

    v00 = t[:, Y0, X0]
    v01 = t[:, Y0, X1]
    v10 = t[:, Y1, X0]
    v11 = t[:, Y1, X1]
    sampled = (
        v00 * ((1 - WY) * (1 - WX))[None]
        + v01 * ((1 - WY) * WX)[None]
        + v10 * (WY * (1 - WX))[None]
        + v11 * (WY * WX)[None]
    )
    sampled = sampled.permute(1, 0, 2, 3)  # (M, C, 2R, 2R)
    return torch.nn.functional.avg_pool2d(sampled, kernel_size=2)


def roi_align_single(fm: FeatureMap, box: Box, out_res: int, sample_id: Optional[int] = None) -> RoiFeature:
    feats = roi_align(fm, [box], out_res)[0]
    return RoiFeature(features=feats, box=box, sample_id=sample_id)


def _boxes_to_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy score-descending NMS (stable ties by index); returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = []
    suppressed = np.zeros(scores.size, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        ious = box_iou_matrix(boxes[idx : idx + 1], boxes)[0]
        suppressed |= ious > iou_thresh
        suppressed[idx] = True
    return np.array(keep, dtype=np.int64)


def generate_anchors(config: PipelineConfig) -> np.ndarray:
    """Single-level anchor grid, one (scale, ratio) set per feature cell."""
    f = config.feature_size
    shapes = []
    for scale in config.anchor_scales:
        for ratio in config.anchor_ratios:
            w = scale / math.sqrt(ratio)
            h = scale * math.sqrt(ratio)
            shapes.append((w, h))
    shapes = np.array(shapes)  # (A, 2)
    cy, cx = np.mgrid[0:f, 0:f].astype(np.float64)
    cx = (cx + 0.5) * config.stride
    cy = (cy + 0.5) * config.stride
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (F*F, 2)
    anchors = np.empty((centers.shape[0], shapes.shape[0], 4))
    anchors[:, :, 0] = centers[:, None, 0] - shapes[None, :, 0] / 2
    anchors[:, :, 1] = centers[:, None, 1] - shapes[None, :, 1] / 2
    anchors[:, :, 2] = centers[:, None, 0] + shapes[None, :, 0] / 2
    anchors[:, :, 3] = centers[:, None, 1] + shapes[None, :, 1] / 2
    return anchors.reshape(-1, 4)


def propose_regions(
    model: PipelineModel,
    fm: FeatureMap,
    mode: str = "learned",
    k: int = 32,
    gt_boxes: Optional[Sequence[Box]] = None,
    rng: Optional[np.random.Generator] = None,
    pre_nms_top: int = 600,
    jitter_amplitude: Optional[float] = None,
) -> tuple:
    """Candidate boxes with objectness scores.

    learned: anchor head scores and regresses the anchor grid, then greedy
    NMS at the proposal IoU threshold keeps the top-k. gt_jitter: cycles the
    ground-truth boxes, each perturbed by uniform noise up to +-10% of its
    size (clipped to the image), until k boxes are produced.
    """
    if k < 1:
        raise PipelineError(f"need k >= 1 proposals, got {k}")
    cfg = model.config
    ih, iw = fm.image_height, fm.image_width
    if mode == "learned":
        anchors = generate_anchors(cfg)
        if anchors.size == 0:
            raise PipelineError("anchor grid is empty; no anchors fit the image")
        with torch.no_grad():
            obj, deltas = model.proposal(fm.tensor.unsqueeze(0))
        a = cfg.num_anchors_per_cell
        scores = torch.sigmoid(obj)[0].permute(1, 2, 0).reshape(-1).numpy()
        d = deltas[0].permute(1, 2, 0).reshape(-1, a, 4).reshape(-1, 4).numpy()
        # anchors are laid out (cell, anchor); match that ordering
        order = np.argsort(-scores, kind="stable")[:pre_nms_top]
        boxes = decode_deltas(d[order], anchors[order])
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, iw)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, ih)
        sel_scores = scores[order]
        valid = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        boxes, sel_scores = boxes[valid], sel_scores[valid]
        keep = nms(boxes, sel_scores, cfg.proposal_nms_iou)[:k]
        return boxes[keep], sel_scores[keep]
    if mode == "gt_jitter":
        if not gt_boxes:
            return np.zeros((0, 4)), np.zeros((0,))
        if rng is None:
            rng = np.random.default_rng(0)
        amp = cfg.jitter_amplitude if jitter_amplitude is None else jitter_amplitude
        out = []
        for i in range(k):
            b = gt_boxes[i % len(gt_boxes)]
            w, h = b.width, b.height
            noise = rng.uniform(-amp, amp, size=4)
            jittered = np.array(
                [b.x1 + noise[0] * w, b.y1 + noise[1] * h, b.x2 + noise[2] * w, b.y2 + noise[3] * h]
            )
            jittered[[0, 2]] = np.clip(jittered[[0, 2]], 0, iw)
            jittered[[1, 3]] = np.clip(jittered[[1, 3]], 0, ih)
            if jittered[2] - jittered[0] < 1.0 or jittered[3] - jittered[1] < 1.0:
                jittered = np.array(b.as_tuple())
            out.append(jittered)
        boxes = np.array(out)
        return boxes, np.ones(len(boxes))
    raise PipelineError(f"unknown proposal mode {mode!r}")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def paste_mask(probs: np.ndarray, box: Box, image_size: int) -> np.ndarray:
    """Bilinear-upsample an MxM probability grid into `box` on a zeroed canvas.

    A canvas pixel receives a value iff its center lies inside the box.
    """
    probs = np.asarray(probs, dtype=np.float64)
    m = probs.shape[0]
    canvas = np.zeros((image_size, image_size), dtype=np.float32)
    px0 = max(int(math.floor(box.x1)), 0)
    px1 = min(int(math.ceil(box.x2)), image_size)
    py0 = max(int(math.floor(box.y1)), 0)
    py1 = min(int(math.ceil(box.y2)), image_size)
    if px1 <= px0 or py1 <= py0:
        return canvas
    xs = np.arange(px0, px1) + 0.5
    ys = np.arange(py0, py1) + 0.5
    inside_x = (xs >= box.x1) & (xs < box.x2)
    inside_y = (ys >= box.y1) & (ys < box.y2)
    u = (xs - box.x1) / box.width * m - 0.5
    v = (ys - box.y1) / box.height * m - 0.5
    u = np.clip(u, 0, m - 1)
    v = np.clip(v, 0, m - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, m - 1)
    v1 = np.minimum(v0 + 1, m - 1)
    wu = u - u0
    wv = v - v0
    vals = (
        probs[np.ix_(v0, u0)] * ((1 - wv)[:, None] * (1 - wu)[None, :])
        + probs[np.ix_(v0, u1)] * ((1 - wv)[:, None] * wu[None, :])
        + probs[np.ix_(v1, u0)] * (wv[:, None] * (1 - wu)[None, :])
        + probs[np.ix_(v1, u1)] * (wv[:, None] * wu[None, :])
    )
    vals = vals * inside_y[:, None] * inside_x[None, :]
    canvas[py0:py1, px0:px1] = vals.astype(np.float32)
    return canvas


def refine_rois(
    model: PipelineModel, fm: FeatureMap, proposals: np.ndarray
) -> tuple:
    """Classify proposal ROIs and decode per-class refined boxes.

    Returns (class distributions (K, N+1), refined boxes (K, 4) for the
    argmax class, argmax class ids (K,), scores (K,)). Boxes are clipped to
    the image; rows whose argmax is background keep their proposal box.
    """
    cfg = model.config
    if proposals.shape[0] == 0:
        return (np.zeros((0, cfg.num_classes + 1)), np.zeros((0, 4)), np.zeros(0, int), np.zeros(0))
    roi7 = roi_align(fm, proposals, cfg.roi_size_box)
    with torch.no_grad():
        dist = model.cls(roi7).numpy().astype(np.float64)
        deltas = model.box(roi7).numpy().astype(np.float64)
    cls_ids = np.array([argmax_lowest(row) for row in dist], dtype=np.int64)
    scores = dist[np.arange(dist.shape[0]), cls_ids]
    refined = proposals.copy()
    fg = cls_ids >= 1
    if np.any(fg):
        sel = decode_deltas(deltas[fg, cls_ids[fg] - 1], proposals[fg])
        sel[:, [0, 2]] = np.clip(sel[:, [0, 2]], 0, fm.image_width)
        sel[:, [1, 3]] = np.clip(sel[:, [1, 3]], 0, fm.image_height)
        refined[fg] = sel
    return dist, refined, cls_ids, scores


def select_detections(
    refined: np.ndarray,
    cls_ids: np.ndarray,
    scores: np.ndarray,
    score_thresh: float,
    nms_iou: float,
    max_dets: int,
) -> np.ndarray:
    """Indices of surviving ROIs: foreground, scored, per-class NMS, capped."""
    valid = (
        (cls_ids >= 1)
        & (scores >= score_thresh)
        & (refined[:, 2] - refined[:, 0] >= 1e-3)
        & (refined[:, 3] - refined[:, 1] >= 1e-3)
    )
    survivors = []
    for c in np.unique(cls_ids[valid]):
        idx = np.flatnonzero(valid & (cls_ids == c))
        keep = nms(refined[idx], scores[idx], nms_iou)
        survivors.extend(idx[keep].tolist())
    survivors = np.array(sorted(survivors, key=lambda i: (-scores[i], i)), dtype=np.int64)
    return survivors[:max_dets]


def baseline_inference(
    model: PipelineModel,
    image: np.ndarray,
    score_thresh: float = 0.5,
    max_dets: int = 20,
    proposals: Optional[np.ndarray] = None,
) -> list:
    """Full baseline forward pass: proposals -> classify/refine -> per-class NMS
    -> multi-class mask head on re-aligned refined boxes -> pasted masks.

    When `proposals` is None the learned anchor head supplies them.
    """
    cfg = model.config
    fm = model.backbone_forward(image)
    if proposals is None:
        proposals, _ = propose_regions(model, fm, mode="learned", k=cfg.proposal_count)
    dist, refined, cls_ids, scores = refine_rois(model, fm, proposals)
    keep = select_detections(refined, cls_ids, scores, score_thresh, cfg.detection_nms_iou, max_dets)
    if keep.size == 0:
        return []
    roi14 = roi_align(fm, refined[keep], cfg.roi_size_mask)
    with torch.no_grad():
        logits = model.mask(roi14)
    detections = []
    for row, i in enumerate(keep):
        c = int(cls_ids[i])
        probs = torch.sigmoid(logits[row, c - 1]).numpy()
        box = Box(*refined[i])
        prob_map = paste_mask(probs, box, cfg.image_size)
        detections.append(
            Detection(
                box=box,
                class_id=c,
                score=float(scores[i]),
                mask=prob_map >= 0.5,
                mask_prob=prob_map,
            )
        )
    return detections
