"""Training loops.

Baseline training jointly optimizes every sub-head (anchor head included)
with the summed terminal losses until the validation mask mAP plateaus.
Per-class head training then optimizes exactly one single-class mask head
at a time against its own mask loss, with the detection base frozen; the
shared feature map is cached per image since nothing upstream of the head
changes. One TrainConfig is reused verbatim for every head so no class
gets a privileged schedule.

Determinism: all randomness flows from numpy generators seeded by
(config.seed, stream, ...) tuples and torch generators derived from them;
training pins torch to a single thread so floating-point reductions have a
fixed order. Per-class streams depend only on (seed, class id), which is
what makes sequential and parallel head training bit-identical.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from splitmask.checkpoint import CheckpointRecord, record_from_model
from splitmask.core import Box, box_iou_matrix, encode_deltas
from splitmask.losses import (
    LossInputError,
    crop_mask_to_box,
    cross_entropy_batch,
    mask_bce_batch,
    per_class_mask_target,
    smooth_l1,
    _bce_elementwise,
)
from splitmask.evalkit import evaluate_per_class, mean_defined_ap
from splitmask.pipeline import (
    FeatureMap,
    PipelineConfig,
    PipelineModel,
    generate_anchors,
    image_to_tensor,
    baseline_inference,
    roi_align,
)
from splitmask.shapesynth import SHAPE_NAMES, SceneSample
from splitmask.switch_split import SwitchSplitModel, switch_inference


class TrainingDivergedError(RuntimeError):
    pass


class EmptyClassError(RuntimeError):
    """A class with no positive ROIs cannot train a head."""


class PerClassTrainingError(RuntimeError):
    """Wraps a failure inside one class's training job."""


@dataclass(frozen=True)
class TrainConfig:
    """Shared hyper-parameters; the identical config drives every head."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 2.0 / 3.0
    grad_clip: float = 2.0  # per-subhead norm clip; balances the pixel-sum mask term
    batch_size: int = 8
    epochs: int = 24
    head_epochs: int = 24  # heads are cheap (frozen base, cached features); give them room
    plateau_min_delta: float = 0.002
    plateau_patience: int = 3
    plateau_warmup: int = 4  # evaluations before the plateau rule may stop training
    eval_every: int = 2
    rois_per_image: int = 64
    positive_fraction: float = 0.25
    fg_iou: float = 0.5
    roi_jitter: float = 0.15
    jitters_per_gt: int = 8
    negatives_pool: int = 48
    proposal_mode: str = "gt_jitter"  # proposal source for plateau eval + inference harness
    eval_score_thresh: float = 0.05  # AP is ranking-based, so evaluation keeps low-score detections
    eval_max_dets: int = 20
    seed: int = 0


def config_json(config: TrainConfig) -> str:
    """Canonical serialization; byte-identical across per-class trainings."""
    return json.dumps(asdict(config), sort_keys=True)


def plateau_reached(history: Sequence[float], min_delta: float = 0.002, patience: int = 3) -> bool:
    """True when the last `patience` evaluations each improved on the best
    preceding value by less than `min_delta`."""
    if len(history) < patience + 1:
        return False
    for i in range(len(history) - patience, len(history)):
        if history[i] - max(history[:i]) >= min_delta:
            return False
    return True


# ---------------------------------------------------------------------------
# ROI sampling
# ---------------------------------------------------------------------------


def _jitter_box(box: Box, amplitude: float, rng: np.random.Generator, size: int) -> np.ndarray:
    w, h = box.width, box.height
    n = rng.uniform(-amplitude, amplitude, size=4)
    j = np.array([box.x1 + n[0] * w, box.y1 + n[1] * h, box.x2 + n[2] * w, box.y2 + n[3] * h])
    j[[0, 2]] = np.clip(j[[0, 2]], 0, size)
    j[[1, 3]] = np.clip(j[[1, 3]], 0, size)
    if j[2] - j[0] < 1.0 or j[3] - j[1] < 1.0:
        return np.array(box.as_tuple())
    return j


def _random_boxes(count: int, rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.empty((count, 4))
    for i in range(count):
        s = np.exp(rng.uniform(np.log(6.0), np.log(56.0)))
        aspect = rng.uniform(0.5, 2.0)
        w, h = s * np.sqrt(aspect), s / np.sqrt(aspect)
        cx = rng.uniform(w / 2, size - w / 2)
        cy = rng.uniform(h / 2, size - h / 2)
        out[i] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return out


def _sample_rois(sample: SceneSample, config: TrainConfig, model_config: PipelineConfig, rng):
    """Candidate ROIs for one image with classification/box/mask targets.

    Candidates are the ground-truth boxes, jittered copies, and random
    negatives; a candidate is positive when its best ground-truth IoU
    reaches fg_iou. At most rois_per_image survive at a 1:3 pos:neg ratio.
    """
    size = model_config.image_size
    gts = sample.annotations
    cands = []
    for a in gts:
        cands.append(np.array(a.box.as_tuple()))
        for _ in range(config.jitters_per_gt):
            cands.append(_jitter_box(a.box, config.roi_jitter, rng, size))
    neg = _random_boxes(config.negatives_pool, rng, size)
    cands = np.array(cands) if cands else np.zeros((0, 4))
    all_boxes = np.concatenate([cands, neg]) if cands.size else neg

    if gts:
        gt_boxes = np.array([a.box.as_tuple() for a in gts])
        iou = box_iou_matrix(all_boxes, gt_boxes)
        best = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(all_boxes)), best]
    else:
        best = np.zeros(len(all_boxes), dtype=int)
        best_iou = np.zeros(len(all_boxes))

    pos_idx = np.flatnonzero(best_iou >= config.fg_iou)
    neg_idx = np.flatnonzero(best_iou < config.fg_iou)
    max_pos = int(config.rois_per_image * config.positive_fraction)
    if pos_idx.size > max_pos:
        pos_idx = rng.permutation(pos_idx)[:max_pos]
    max_neg = config.rois_per_image - pos_idx.size
    if neg_idx.size > max_neg:
        neg_idx = rng.permutation(neg_idx)[:max_neg]

    sel = np.concatenate([np.sort(pos_idx), np.sort(neg_idx)]).astype(int)
    boxes = all_boxes[sel]
    labels = np.zeros(sel.size, dtype=np.int64)
    n_pos = pos_idx.size
    box_targets = np.zeros((n_pos, 4))
    mask_targets = np.zeros((n_pos, model_config.mask_resolution, model_config.mask_resolution))
    pos_classes = np.zeros(n_pos, dtype=np.int64)
    for row, i in enumerate(np.sort(pos_idx)):
        g = gts[best[i]]
        labels[row] = g.class_id
        pos_classes[row] = g.class_id
        box_targets[row] = encode_deltas(np.array([g.box.as_tuple()]), all_boxes[i : i + 1])[0]
        mask_targets[row] = crop_mask_to_box(g.mask, Box(*all_boxes[i]), model_config.mask_resolution)
    return {
        "boxes": boxes,
        "labels": labels,
        "n_pos": n_pos,
        "box_targets": box_targets,
        "mask_targets": mask_targets,
        "pos_classes": pos_classes,
    }


def _rpn_targets(anchors: np.ndarray, gts, rng, pos_iou=0.7, neg_iou=0.3, sample_size=32, max_pos=16):
    """Sampled anchor indices with objectness/delta targets."""
    if gts:
        gt_boxes = np.array([a.box.as_tuple() for a in gts])
        iou = box_iou_matrix(anchors, gt_boxes)
        best = iou.argmax(axis=1)
        best_iou = iou[np.arange(len(anchors)), best]
        pos_mask = best_iou >= pos_iou
        # every ground truth claims its best anchor even below the threshold
        pos_mask[iou.argmax(axis=0)] = True
        neg_mask = (best_iou < neg_iou) & ~pos_mask
    else:
        best = np.zeros(len(anchors), dtype=int)
        pos_mask = np.zeros(len(anchors), dtype=bool)
        neg_mask = np.ones(len(anchors), dtype=bool)
    pos_idx = np.flatnonzero(pos_mask)
    if pos_idx.size > max_pos:
        pos_idx = rng.permutation(pos_idx)[:max_pos]
    neg_idx = np.flatnonzero(neg_mask)
    n_neg = min(sample_size - pos_idx.size, neg_idx.size)
    neg_idx = rng.permutation(neg_idx)[:n_neg]
    pos_idx, neg_idx = np.sort(pos_idx), np.sort(neg_idx)
    delta_targets = (
        encode_deltas(np.array([gts[best[i]].box.as_tuple() for i in pos_idx]), anchors[pos_idx])
        if pos_idx.size
        else np.zeros((0, 4))
    )
    return pos_idx, neg_idx, delta_targets


# ---------------------------------------------------------------------------
# baseline training
# ---------------------------------------------------------------------------


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _baseline_batch_terms(model, batch, anchors, config, model_config, rng) -> dict:
    """All loss terms for one image batch of joint baseline training."""
    images = torch.stack([image_to_tensor(s.image, model_config) for s in batch])
    fms = model.backbone(images)

    roi_sets = [_sample_rois(s, config, model_config, rng) for s in batch]
    roi7_list, roi14_list = [], []
    labels, n_pos_total = [], 0
    box_targets, mask_targets, pos_classes = [], [], []
    for b, rs in enumerate(roi_sets):
        fm = FeatureMap(tensor=fms[b], stride=model_config.stride)
        if rs["boxes"].shape[0]:
            roi7_list.append(roi_align(fm, rs["boxes"], model_config.roi_size_box))
            labels.append(rs["labels"])
        if rs["n_pos"]:
            roi14_list.append(roi_align(fm, rs["boxes"][: rs["n_pos"]], model_config.roi_size_mask))
            box_targets.append(rs["box_targets"])
            mask_targets.append(rs["mask_targets"])
            pos_classes.append(rs["pos_classes"])
            n_pos_total += rs["n_pos"]

    terms = {}
    if roi7_list:
        roi7 = torch.cat(roi7_list)
        label_t = torch.from_numpy(np.concatenate(labels))
        dist = model.cls(roi7)
        terms["cls"] = cross_entropy_batch(dist, label_t)
        if n_pos_total:
            deltas = model.box(roi7)
            pos_rows = []
            offset = 0
            for rs in roi_sets:
                pos_rows.extend(range(offset, offset + rs["n_pos"]))
                offset += rs["boxes"].shape[0]
            pc = torch.from_numpy(np.concatenate(pos_classes))
            pred = deltas[pos_rows, pc - 1]
            target = torch.from_numpy(np.concatenate(box_targets).astype(np.float32))
            terms["box"] = smooth_l1(pred - target, reduction="sum").value / n_pos_total
    if roi14_list:
        roi14 = torch.cat(roi14_list)
        logits = model.mask(roi14)
        pc = torch.from_numpy(np.concatenate(pos_classes))
        sel = logits[torch.arange(logits.shape[0]), pc - 1]
        probs = torch.sigmoid(sel)
        targets = torch.from_numpy(np.concatenate(mask_targets).astype(np.float32))
        terms["mask"] = mask_bce_batch(probs, targets)

    # anchor head trains on its own objectness/regression pair
    obj_logits, rpn_deltas = model.proposal(fms)
    a_per_cell = model_config.num_anchors_per_cell
    rpn_obj_terms, rpn_box_terms = [], []
    for b, s in enumerate(batch):
        pos_idx, neg_idx, delta_t = _rpn_targets(anchors, s.annotations, rng)
        flat_obj = obj_logits[b].permute(1, 2, 0).reshape(-1)
        sel_idx = np.concatenate([pos_idx, neg_idx])
        if sel_idx.size:
            probs = torch.sigmoid(flat_obj[torch.from_numpy(sel_idx)])
            target = torch.from_numpy(
                np.concatenate([np.ones(pos_idx.size), np.zeros(neg_idx.size)]).astype(np.float32)
            )
            rpn_obj_terms.append(_bce_elementwise(probs, target).mean())
        if pos_idx.size:
            flat_d = rpn_deltas[b].permute(1, 2, 0).reshape(-1, a_per_cell, 4).reshape(-1, 4)
            pred = flat_d[torch.from_numpy(pos_idx)]
            rpn_box_terms.append(
                smooth_l1(pred - torch.from_numpy(delta_t.astype(np.float32)), "sum").value
                / pos_idx.size
            )
    if rpn_obj_terms:
        terms["rpn_obj"] = torch.stack(rpn_obj_terms).mean()
    if rpn_box_terms:
        terms["rpn_box"] = torch.stack(rpn_box_terms).mean()
    return terms


def train_baseline(
    train_samples: Sequence[SceneSample],
    val_samples: Sequence[SceneSample],
    model_config: PipelineConfig,
    config: TrainConfig,
    progress: Optional[Callable[[str], None]] = None,
) -> tuple:
    """Joint training of all sub-heads to the plateau criterion.

    Returns (model, CheckpointRecord); deterministic for a fixed seed.
    """
    if not train_samples:
        raise ValueError("empty training split")
    torch.set_num_threads(1)
    model = PipelineModel(model_config, seed=config.seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng([config.seed, 11])
    anchors = generate_anchors(model_config)

    history: list = []
    metric_log: list = []
    step = 0
    lr_drop = max(1, int(round(config.epochs * config.lr_decay_at)))
    epochs_run = 0
    for epoch in range(config.epochs):
        if epoch == lr_drop:
            _set_lr(optimizer, config.lr * config.lr_decay_factor)
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            try:
                terms = _baseline_batch_terms(model, batch, anchors, config, model_config, rng)
                total = sum(terms.values())
                finite = bool(torch.isfinite(total))
            except LossInputError as e:
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}): {e}"
                ) from e
            if not finite:
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}): "
                    + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items())
                )
            optimizer.zero_grad()
            total.backward()
            for sub in model.subheads().values():
                torch.nn.utils.clip_grad_norm_(sub.parameters(), config.grad_clip)
            optimizer.step()
            step += 1
        epochs_run = epoch + 1

        is_last = epoch + 1 == config.epochs
        if (epoch + 1) % config.eval_every == 0 or is_last:
            val_map = validation_mask_map(model, val_samples, config)
            history.append(val_map)
            metric_log.append(
                {
                    "epoch": epoch + 1,
                    "step": step,
                    "loss": {k: float(v.detach()) for k, v in terms.items()},
                    "val_mask_map": val_map,
                }
            )
            if progress:
                progress(f"epoch {epoch + 1}: val mask mAP {val_map:.4f}")
            if len(history) > config.plateau_warmup and plateau_reached(
                history, config.plateau_min_delta, config.plateau_patience
            ):
                break

    record = record_from_model(
        model,
        kind="baseline",
        meta={
            "epochs_run": epochs_run,
            "metric_history": history,
            "metric_log": metric_log,
            "train_config": json.loads(config_json(config)),
        },
        class_names=SHAPE_NAMES[: model_config.num_classes],
    )
    return model, record


def jitter_eval_proposals(sample: SceneSample, config: TrainConfig, image_size: int) -> np.ndarray:
    """Fixed per-sample jittered ground-truth proposals for evaluation runs."""
    gts = [a.box for a in sample.annotations]
    if not gts:
        return np.zeros((0, 4))
    rng = np.random.default_rng([config.seed, 555, sample.sample_id])
    out = []
    for b in gts:
        out.append(_jitter_box(b, 0.10, rng, image_size))
    return np.array(out)


def infer_sample(model, sample: SceneSample, config: TrainConfig):
    """Inference harness used by plateau evaluation and the CLI: builds the
    configured proposals and dispatches on the model kind."""
    from splitmask.switch_split import CascadeModel, cascade_forward

    proposals = None
    if config.proposal_mode == "gt_jitter":
        proposals = jitter_eval_proposals(sample, config, model.config.image_size)
    if isinstance(model, CascadeModel):
        return cascade_forward(
            model, sample.image, config.eval_score_thresh, config.eval_max_dets, proposals=proposals
        )
    if isinstance(model, SwitchSplitModel):
        return switch_inference(
            model, sample.image, config.eval_score_thresh, config.eval_max_dets, proposals=proposals
        )
    return baseline_inference(
        model, sample.image, config.eval_score_thresh, config.eval_max_dets, proposals=proposals
    )


def validation_mask_map(model, val_samples: Sequence[SceneSample], config: TrainConfig) -> float:
    """Mean over classes of mask AP on per-class validation sub-datasets."""
    cache: dict = {}

    def infer(sample):
        if sample.sample_id not in cache:
            cache[sample.sample_id] = infer_sample(model, sample, config)
        return cache[sample.sample_id]

    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_class = evaluate_per_class(val_samples, infer, model.config.num_classes)
    mean = mean_defined_ap(per_class)
    return 0.0 if mean is None else mean


# ---------------------------------------------------------------------------
# per-class head training
# ---------------------------------------------------------------------------


def _feature_cache(model: SwitchSplitModel, samples: Sequence[SceneSample]) -> dict:
    cache = {}
    for s in samples:
        cache[s.sample_id] = model.backbone_forward(s.image)
    return cache


def _positive_rois_for_class(
    sample: SceneSample, class_id: int, config: TrainConfig, model_config: PipelineConfig, rng
):
    """Jittered positive ROIs of one class with per-class mask targets."""
    size = model_config.image_size
    max_pos = int(config.rois_per_image * config.positive_fraction)
    boxes, targets = [], []
    anns = [a for a in sample.annotations if a.class_id == class_id]
    per_gt = max(1, min(config.jitters_per_gt, max_pos // max(1, len(anns))))
    for a in anns:
        candidates = [np.array(a.box.as_tuple())]
        for _ in range(per_gt):
            candidates.append(_jitter_box(a.box, config.roi_jitter, rng, size))
        gt_arr = np.array([a.box.as_tuple()])
        for cand in candidates:
            if box_iou_matrix(cand[None], gt_arr)[0, 0] < config.fg_iou:
                continue
            boxes.append(cand)
            targets.append(
                per_class_mask_target(
                    Box(*cand), a.mask, a.class_id, class_id, model_config.mask_resolution
                )
            )
    if not boxes:
        return np.zeros((0, 4)), np.zeros((0, model_config.mask_resolution, model_config.mask_resolution))
    boxes = np.array(boxes)[: config.rois_per_image]
    targets = np.array(targets, dtype=np.float64)[: config.rois_per_image]
    return boxes, targets


def _head_loss(head, fm: FeatureMap, boxes: np.ndarray, targets: np.ndarray, model_config) -> torch.Tensor:
    roi14 = roi_align(fm, boxes, model_config.roi_size_mask)
    logits = head(roi14)
    probs = torch.sigmoid(logits[:, 0])
    return mask_bce_batch(probs, torch.from_numpy(targets.astype(np.float32)))


def train_class_head(
    model: SwitchSplitModel,
    class_id: int,
    samples: Sequence[SceneSample],
    config: TrainConfig,
    feature_cache: Optional[dict] = None,
) -> tuple:
    """Train one registry head in place on its own mask loss.

    Only head parameters enter the optimizer; the frozen base and every
    other head are untouched (asserted byte-for-byte by the test suite).
    Returns (head, metrics).
    """
    torch.set_num_threads(1)
    head = model.heads.head_for(class_id)
    model_config = model.config
    class_samples = [s for s in samples if any(a.class_id == class_id for a in s.annotations)]
    if not class_samples:
        raise EmptyClassError(
            f"class {class_id} has no samples in the training split; inspect the dataset "
            f"(a severely under-sampled class cannot train a specialized head)"
        )
    if feature_cache is None:
        feature_cache = _feature_cache(model, class_samples)

    rng = np.random.default_rng([config.seed, 77, class_id])
    probe_rng = np.random.default_rng([config.seed, 78, class_id])

    # fixed probe set to measure the head's loss before vs after training
    probe = []
    for s in class_samples[: min(len(class_samples), 50)]:
        b, t = _positive_rois_for_class(s, class_id, config, model_config, probe_rng)
        if b.shape[0]:
            probe.append((s.sample_id, b, t))

    def probe_loss() -> float:
        with torch.no_grad():
            vals = [
                float(_head_loss(head, feature_cache[sid], b, t, model_config))
                for sid, b, t in probe
            ]
        return float(np.mean(vals)) if vals else float("nan")

    loss_init = probe_loss()

    optimizer = torch.optim.SGD(
        head.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    lr_drop = max(1, int(round(config.head_epochs * config.lr_decay_at)))
    step = 0
    total_pos = 0
    epoch_losses = []
    for epoch in range(config.head_epochs):
        if epoch == lr_drop:
            _set_lr(optimizer, config.lr * config.lr_decay_factor)
        order = rng.permutation(len(class_samples))
        running = []
        for start in range(0, len(order), config.batch_size):
            batch_boxes, batch_targets, batch_rows = [], [], []
            for i in order[start : start + config.batch_size]:
                s = class_samples[i]
                b, t = _positive_rois_for_class(s, class_id, config, model_config, rng)
                if b.shape[0] == 0:
                    continue
                batch_rows.append((s.sample_id, b, t))
                total_pos += b.shape[0]
            if not batch_rows:
                continue
            try:
                losses = [
                    _head_loss(head, feature_cache[sid], b, t, model_config) for sid, b, t in batch_rows
                ]
                total = torch.stack(losses).mean()
                finite = bool(torch.isfinite(total))
            except LossInputError as e:
                raise TrainingDivergedError(
                    f"class {class_id}: non-finite mask loss at step {step} (epoch {epoch}): {e}"
                ) from e
            if not finite:
                raise TrainingDivergedError(
                    f"class {class_id}: non-finite mask loss at step {step} (epoch {epoch})"
                )
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(head.parameters(), config.grad_clip)
            optimizer.step()  # head params only; base and sibling heads never enter the optimizer
            running.append(float(total.detach()))
            step += 1
        epoch_losses.append(float(np.mean(running)) if running else float("nan"))
    if total_pos == 0:
        raise EmptyClassError(
            f"class {class_id} produced no positive ROIs during training; inspect the dataset"
        )
    metrics = {
        "class_id": class_id,
        "samples": len(class_samples),
        "positive_rois": total_pos,
        "probe_loss_init": loss_init,
        "probe_loss_final": probe_loss(),
        "epoch_losses": epoch_losses,
        "config_json": config_json(config),
    }
    return head, metrics


def train_all_heads(
    model: SwitchSplitModel,
    classes: Optional[Sequence[int]],
    samples: Sequence[SceneSample],
    config: TrainConfig,
    mode: str = "sequential",
    jobs: Optional[int] = None,
) -> tuple:
    """Train every requested head from its surgery state, in place.

    Sequential and parallel modes produce bit-identical registries because
    each class's training reads only frozen shared state plus its own head,
    and draws from its own (seed, class)-derived random stream.
    Returns (registry, {class_id: metrics}).
    """
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown mode {mode!r}")
    torch.set_num_threads(1)
    class_list = list(classes) if classes else model.heads.class_ids
    train_subset = [
        s for s in samples if any(a.class_id in set(class_list) for a in s.annotations)
    ]
    cache = _feature_cache(model, train_subset)

    metrics: dict = {}

    def run(c: int):
        try:
            return train_class_head(model, c, samples, config, feature_cache=cache)
        except Exception as e:
            raise PerClassTrainingError(f"training head for class {c} failed: {e}") from e

    if mode == "sequential":
        for c in class_list:
            _head, m = run(c)
            metrics[c] = m
    else:
        workers = jobs or len(class_list)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {c: pool.submit(run, c) for c in class_list}
            for c, fut in futures.items():
                _head, m = fut.result()
                metrics[c] = m
    return model.heads, metrics
