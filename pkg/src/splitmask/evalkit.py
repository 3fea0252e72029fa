"""COCO-convention evaluation for the desk-scale pipeline.

AP is the 101-point interpolated average precision, averaged over IoU
thresholds .50:.05:.95 for the headline number, with AP50/AP75 at single
thresholds and APs/APm/APl restricted to area buckets. Area thresholds are
COCO's 32^2/96^2 scaled by s = image_area / 640^2 so the buckets stay
meaningful on a small canvas. Buckets with no ground truth are undefined
(None) and excluded from aggregates.

Bucket restriction uses ignore semantics: ground truth outside the bucket
is ignored, detections matched to ignored ground truth are dropped from
the ranking, and unmatched detections whose own area falls outside the
bucket are dropped rather than counted as false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from splitmask.core import Detection, box_iou, box_iou_matrix, mask_iou
from splitmask.shapesynth import InstanceAnnotation, SceneSample, split_validation_per_class

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

# COCO area thresholds on a 640x640-equivalent canvas
_SMALL_REF = 32.0**2
_LARGE_REF = 96.0**2
_REF_AREA = 640.0**2


class EvalError(ValueError):
    pass


class IncomparableReportsError(EvalError):
    """Before/after halves computed on different datasets."""


@dataclass
class ApBreakdown:
    """AP family for one class; None marks a bucket with no ground truth."""

    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    ap_small: Optional[float] = None
    ap_medium: Optional[float] = None
    ap_large: Optional[float] = None

    METRICS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large")

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in self.METRICS}


def area_buckets(image_area: float) -> dict:
    s = image_area / _REF_AREA
    return {
        "small": (0.0, _SMALL_REF * s),
        "medium": (_SMALL_REF * s, _LARGE_REF * s),
        "large": (_LARGE_REF * s, float("inf")),
        "all": (0.0, float("inf")),
    }


def _detection_iou(det: Detection, gt: InstanceAnnotation, kind: str) -> float:
    if kind == "mask":
        return mask_iou(det.mask, gt.mask)
    if kind == "box":
        return box_iou(det.box, gt.box)
    raise EvalError(f"unknown IoU kind {kind!r}")


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[InstanceAnnotation],
    iou_thresh: float,
    kind: str = "mask",
) -> np.ndarray:
    """Greedy single-image, single-class matching.

    Detections are taken in descending score order (stable on ties); each
    matches the unmatched ground truth of highest IoU >= iou_thresh, each
    ground truth matches at most once, and everything else is a false
    positive. Returns TP flags aligned with the input detection order.
    """
    classes = {d.class_id for d in dets} | {g.class_id for g in gts}
    if len(classes) > 1:
        raise EvalError(f"match_detections expects a single class, got {sorted(classes)}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    tp = np.zeros(len(dets), dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        best_j, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = _detection_iou(dets[i], gt, kind)
            if iou > best_iou or (best_j == -1 and iou >= iou_thresh and iou >= best_iou):
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def _match_with_ignore(
    iou: np.ndarray, det_order: np.ndarray, gt_ignore: np.ndarray, thresh: float
) -> tuple:
    """Greedy matching that prefers non-ignored ground truth.

    Returns (matched gt index or -1 per detection, matched-to-ignored flag).
    """
    n_det, n_gt = iou.shape
    matched = np.full(n_det, -1, dtype=np.int64)
    matched_ignored = np.zeros(n_det, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    for i in det_order:
        best_j, best_iou, best_is_ignored = -1, thresh - 1e-12, False
        for j in range(n_gt):
            if taken[j]:
                continue
            v = iou[i, j]
            if v < thresh:
                continue
            # a real match always beats an ignored one; among equals take higher IoU
            if best_j >= 0 and not best_is_ignored and gt_ignore[j]:
                continue
            if (best_is_ignored and not gt_ignore[j]) or v > best_iou:
                best_j, best_iou, best_is_ignored = j, v, bool(gt_ignore[j])
        if best_j >= 0:
            taken[best_j] = True
            matched[i] = best_j
            matched_ignored[i] = gt_ignore[best_j]
    return matched, matched_ignored


def average_precision(tp_labels: Sequence[bool], scores: Sequence[float], num_gt: int) -> Optional[float]:
    """101-point interpolated AP over pooled detections.

    Detections are ranked by descending score with ties broken by input
    index; precision is envelope-interpolated and sampled on the 101-point
    recall grid. Returns None when there is no ground truth (undefined).
    """
    if num_gt < 0:
        raise EvalError("num_gt must be non-negative")
    if num_gt == 0:
        return None
    tp = np.asarray(tp_labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if tp.shape != scores.shape:
        raise EvalError("tp labels and scores must align")
    if tp.size == 0:
        return 0.0
    order = np.lexsort((np.arange(scores.size), -scores))
    tp = tp[order]
    s = scores[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    # PR points only at score-group boundaries: detections tied on score are
    # processed as one block, so equal-score ordering cannot affect the curve
    boundary = np.append(s[1:] != s[:-1], True)
    recall = cum_tp[boundary] / num_gt
    precision = (cum_tp / np.maximum(cum_tp + cum_fp, 1))[boundary]
    # precision envelope: best precision at any recall >= r
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


def _gather_class(
    samples: Sequence[SceneSample],
    detections_per_sample: Sequence[Sequence[Detection]],
    class_id: int,
    kind: str,
):
    """Per-image dets/gts of one class plus the det-gt IoU matrices."""
    if len(samples) != len(detections_per_sample):
        raise EvalError("one detection list per sample required")
    per_image = []
    for sample, dets in zip(samples, detections_per_sample):
        d = [x for x in dets if x.class_id == class_id]
        g = [a for a in sample.annotations if a.class_id == class_id]
        iou = np.zeros((len(d), len(g)))
        for i, det in enumerate(d):
            for j, gt in enumerate(g):
                iou[i, j] = _detection_iou(det, gt, kind)
        d_area = np.array(
            [int(np.count_nonzero(x.mask)) if kind == "mask" else x.box.area for x in d],
            dtype=np.float64,
        )
        g_area = np.array([a.area if kind == "mask" else a.box.area for a in g], dtype=np.float64)
        scores = np.array([x.score for x in d], dtype=np.float64)
        order = np.lexsort((np.arange(len(d)), -scores))
        per_image.append({"iou": iou, "scores": scores, "order": order, "d_area": d_area, "g_area": g_area})
    return per_image


def _bucket_ap(per_image, thresholds, area_range) -> Optional[float]:
    """Mean AP over `thresholds` with ground truth restricted to an area range."""
    lo, hi = area_range
    num_gt = sum(int(np.count_nonzero((im["g_area"] >= lo) & (im["g_area"] < hi))) for im in per_image)
    if num_gt == 0:
        return None
    aps = []
    for thr in thresholds:
        labels, scores = [], []
        for im in per_image:
            gt_ignore = ~((im["g_area"] >= lo) & (im["g_area"] < hi))
            matched, matched_ignored = _match_with_ignore(im["iou"], im["order"], gt_ignore, thr)
            det_in_range = (im["d_area"] >= lo) & (im["d_area"] < hi)
            for i in range(im["scores"].size):
                if matched[i] >= 0 and matched_ignored[i]:
                    continue  # matched an out-of-bucket gt: drop from ranking
                if matched[i] < 0 and not det_in_range[i]:
                    continue  # unmatched and itself out of bucket: not this bucket's FP
                labels.append(matched[i] >= 0)
                scores.append(im["scores"][i])
        aps.append(average_precision(labels, scores, num_gt))
    return float(np.mean([a for a in aps if a is not None]))


def evaluate(
    samples: Sequence[SceneSample],
    detections_per_sample: Sequence[Sequence[Detection]],
    class_id: int,
    kind: str = "mask",
) -> ApBreakdown:
    """AP breakdown for one class over a (per-class) sub-dataset."""
    if not samples:
        import warnings

        warnings.warn(f"empty sub-dataset for class {class_id}; breakdown undefined", RuntimeWarning)
        return ApBreakdown()
    per_image = _gather_class(samples, detections_per_sample, class_id, kind)
    image_area = float(samples[0].image.shape[0] * samples[0].image.shape[1])
    buckets = area_buckets(image_area)
    return ApBreakdown(
        ap=_bucket_ap(per_image, IOU_THRESHOLDS, buckets["all"]),
        ap50=_bucket_ap(per_image, (0.5,), buckets["all"]),
        ap75=_bucket_ap(per_image, (0.75,), buckets["all"]),
        ap_small=_bucket_ap(per_image, IOU_THRESHOLDS, buckets["small"]),
        ap_medium=_bucket_ap(per_image, IOU_THRESHOLDS, buckets["medium"]),
        ap_large=_bucket_ap(per_image, IOU_THRESHOLDS, buckets["large"]),
    )


def evaluate_per_class(
    val_samples: Sequence[SceneSample],
    infer: Callable[[SceneSample], Sequence[Detection]],
    num_classes: int,
    kind: str = "mask",
) -> dict:
    """Split validation per class and evaluate each class on its own
    sub-dataset (other classes' annotations removed from the ground truth).

    Inference always runs on the original full scene — the model does not
    know about the per-class split — so `infer` receives the unfiltered
    sample and its detections are reused across the per-class evaluations.
    """
    originals = {s.sample_id: s for s in val_samples}
    out = {}
    for c in range(1, num_classes + 1):
        sub = split_validation_per_class(val_samples, c)
        dets = [infer(originals[s.sample_id]) for s in sub]
        out[c] = evaluate(sub, dets, c, kind=kind) if sub else ApBreakdown()
    return out


def mean_defined_ap(per_class: dict) -> Optional[float]:
    vals = [b.ap for b in per_class.values() if b.ap is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# before/after reports
# ---------------------------------------------------------------------------


@dataclass
class EvalHalf:
    """One arm of a comparison: per-class breakdowns plus identification."""

    model_tag: str
    dataset_digest: str
    per_class: dict  # class_id -> ApBreakdown
    class_names: dict = field(default_factory=dict)  # class_id -> str

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "dataset_digest": self.dataset_digest,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "per_class": {str(k): v.as_dict() for k, v in self.per_class.items()},
        }

    @staticmethod
    def from_json(doc: dict) -> "EvalHalf":
        return EvalHalf(
            model_tag=doc["model_tag"],
            dataset_digest=doc["dataset_digest"],
            per_class={int(k): ApBreakdown(**v) for k, v in doc["per_class"].items()},
            class_names={int(k): v for k, v in doc.get("class_names", {}).items()},
        )


def save_eval_half(half: EvalHalf, path) -> None:
    Path(path).write_text(json.dumps(half.to_json(), indent=2, sort_keys=True))


def load_eval_half(path) -> EvalHalf:
    return EvalHalf.from_json(json.loads(Path(path).read_text()))


@dataclass
class EvalReport:
    """Per-class before/after breakdowns with deltas and aggregates."""

    before: EvalHalf
    after: EvalHalf
    deltas: dict  # class_id -> {metric: delta or None}
    mean_ap_delta: Optional[float]

    @property
    def classes(self) -> list:
        return sorted(self.before.per_class)


def compare_reports(before: EvalHalf, after: EvalHalf) -> EvalReport:
    """Pair two halves computed on identical sub-datasets into a report."""
    if before.dataset_digest != after.dataset_digest:
        raise IncomparableReportsError(
            f"dataset digests differ: {before.dataset_digest[:12]} vs {after.dataset_digest[:12]}"
        )
    if sorted(before.per_class) != sorted(after.per_class):
        raise IncomparableReportsError("before/after cover different class sets")
    deltas = {}
    ap_deltas = []
    for c in sorted(before.per_class):
        row = {}
        for m in ApBreakdown.METRICS:
            b = getattr(before.per_class[c], m)
            a = getattr(after.per_class[c], m)
            row[m] = None if b is None or a is None else a - b
        deltas[c] = row
        if row["ap"] is not None:
            ap_deltas.append(row["ap"])
    return EvalReport(
        before=before,
        after=after,
        deltas=deltas,
        mean_ap_delta=float(np.mean(ap_deltas)) if ap_deltas else None,
    )


def _fmt(v: Optional[float]) -> str:
    return "  --  " if v is None else f"{v:6.3f}"


def render_table(report: EvalReport) -> str:
    """Plain-text before/after/delta table, one class per row group."""
    lines = []
    header = f"{'class':<12}{'metric':<10}{'before':>8}{'after':>8}{'delta':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for c in report.classes:
        name = report.before.class_names.get(c, f"class{c}")
        for m in ApBreakdown.METRICS:
            b = getattr(report.before.per_class[c], m)
            a = getattr(report.after.per_class[c], m)
            d = report.deltas[c][m]
            label = name if m == "ap" else ""
            lines.append(f"{label:<12}{m:<10}{_fmt(b):>8}{_fmt(a):>8}{_fmt(d):>8}")
    agg = report.mean_ap_delta
    lines.append("-" * len(header))
    lines.append(f"{'mean':<12}{'ap':<10}{'':>8}{'':>8}{_fmt(agg):>8}")
    return "\n".join(lines)


def render_csv(report: EvalReport) -> str:
    rows = ["class,metric,before,after,delta"]
    for c in report.classes:
        name = report.before.class_names.get(c, f"class{c}")
        for m in ApBreakdown.METRICS:
            b = getattr(report.before.per_class[c], m)
            a = getattr(report.after.per_class[c], m)
            d = report.deltas[c][m]
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            rows.append(f"{name},{m},{fmt(b)},{fmt(a)},{fmt(d)}")
    return "\n".join(rows) + "\n"


def plot_comparison(reports: dict, path) -> None:
    """Bar chart of mean AP before/after, one pair of bars per model tag."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tags = list(reports)
    before_vals = [mean_defined_ap(r.before.per_class) or 0.0 for r in reports.values()]
    after_vals = [mean_defined_ap(r.after.per_class) or 0.0 for r in reports.values()]
    x = np.arange(len(tags))
    width = 0.35
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(tags), 4))
    ax.bar(x - width / 2, before_vals, width, label="before", color="#888888")
    ax.bar(x + width / 2, after_vals, width, label="after", color="#2b6cb0")
    ax.set_xticks(x)
    ax.set_xticklabels(tags)
    ax.set_ylabel("mean mask AP")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# misrouting diagnostic
# ---------------------------------------------------------------------------


@dataclass
class MisroutingReport:
    rate: Optional[float]  # None when nothing was dispatched and matched
    dispatched: int
    matched: int
    mismatched: int
    background_fp: int


def misrouting_from_records(
    records_per_sample: Sequence[Sequence],
    samples: Sequence[SceneSample],
    iou_thresh: float = 0.5,
) -> MisroutingReport:
    """Score dispatch records against ground truth: a dispatched ROI is
    misrouted when its routed class differs from its best-IoU (>= 0.5)
    ground-truth match; unmatched ROIs count as background false positives."""
    dispatched = matched = mismatched = background_fp = 0
    for sample, records in zip(samples, records_per_sample):
        gts = sample.annotations
        if not records:
            continue
        boxes = np.array([r.box.as_tuple() for r in records])
        if gts:
            gt_boxes = np.array([a.box.as_tuple() for a in gts])
            iou = box_iou_matrix(boxes, gt_boxes)
        else:
            iou = np.zeros((len(records), 0))
        for i, rec in enumerate(records):
            dispatched += 1
            if iou.shape[1] and iou[i].max() >= iou_thresh:
                matched += 1
                gt_class = gts[int(np.argmax(iou[i]))].class_id
                if rec.routed_class != gt_class:
                    mismatched += 1
            else:
                background_fp += 1
    rate = mismatched / matched if matched else None
    return MisroutingReport(
        rate=rate,
        dispatched=dispatched,
        matched=matched,
        mismatched=mismatched,
        background_fp=background_fp,
    )


def misrouting_rate(model, samples, score_thresh: float = 0.5, proposals_per_sample=None) -> MisroutingReport:
    """Run switch inference over `samples` and score the dispatch decisions."""
    from splitmask.switch_split import switch_inference

    records_all = []
    for idx, sample in enumerate(samples):
        props = None if proposals_per_sample is None else proposals_per_sample[idx]
        _dets, records = switch_inference(
            model, sample.image, score_thresh=score_thresh, proposals=props, return_dispatch=True
        )
        records_all.append(records)
    return misrouting_from_records(records_all, samples)
