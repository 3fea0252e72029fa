"""Classifier-driven switch over independent per-class mask heads.

The shared multi-class mask head of a baseline model is replaced by a
registry of single-class heads, one per foreground class, with fully
disjoint parameters. At inference each surviving ROI's class distribution
turns the switch: background argmax rejects the ROI, a foreground argmax
dispatches its re-aligned features to exactly one head. Surgery builds the
registry from a baseline model, either by slicing the shared head's final
layer per class (keeping the plateaued model's knowledge) or by fresh
initialization.

A generic multi-stage cascade wiring is included: each stage re-classifies
and re-refines the previous stage's boxes, final boxes come from the last
stage, classification is the renormalized mean over stage distributions,
and masks come from the last stage's head registry.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from splitmask.core import Box, Detection, argmax_lowest, validate_distribution
from splitmask.pipeline import (
    Backbone,
    BoxHead,
    ClsHead,
    FeatureMap,
    MaskTrunk,
    PipelineConfig,
    PipelineError,
    PipelineModel,
    RpnHead,
    _init_layers,
    _init_predictor,
    image_to_tensor,
    paste_mask,
    propose_regions,
    refine_rois,
    roi_align,
    select_detections,
)


from splitmask.checkpoint import (
    CheckpointRecord,
    load_params_into_model,
    params_from_model,
    payload_digest,
)


class SwitchSplitError(RuntimeError):
    pass


class RegistryError(SwitchSplitError):
    """Incomplete registry or aliased head parameters."""


class SurgeryError(SwitchSplitError):
    pass


class SingleClassMaskHead(nn.Module):
    """Mask head owning exactly one foreground class: shared trunk structure,
    single-channel logit output."""

    def __init__(self, config: PipelineConfig, class_id: int):
        super().__init__()
        if class_id < 1:
            raise RegistryError(f"mask heads own foreground classes only, got {class_id}")
        self.class_id = class_id
        self.trunk = MaskTrunk(config)
        self.logits = nn.Conv2d(config.mask_channels, 1, 1)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        return self.logits(self.trunk(rois))


def fresh_head(config: PipelineConfig, class_id: int, seed: int) -> SingleClassMaskHead:
    head = SingleClassMaskHead(config, class_id)
    child_seed = int(np.random.SeedSequence([seed, class_id]).generate_state(1)[0])
    g = torch.Generator().manual_seed(child_seed)
    _init_layers(head, g)
    _init_predictor(head.logits, g, std=0.01)
    return head


def sliced_head(baseline: PipelineModel, class_id: int) -> SingleClassMaskHead:
    """Copy the shared head's trunk and slice its final layer to one class."""
    head = SingleClassMaskHead(baseline.config, class_id)
    head.trunk.load_state_dict(copy.deepcopy(baseline.mask.trunk.state_dict()))
    with torch.no_grad():
        head.logits.weight.copy_(baseline.mask.logits.weight[class_id - 1 : class_id].clone())
        head.logits.bias.copy_(baseline.mask.logits.bias[class_id - 1 : class_id].clone())
    return head


class HeadRegistry(nn.ModuleDict):
    """Map from foreground class id to its mask head; complete over the catalog,
    with no parameter storage shared between heads."""

    def __init__(self, heads: dict):
        super().__init__({str(c): h for c, h in sorted(heads.items())})

    def head_for(self, class_id: int) -> SingleClassMaskHead:
        key = str(class_id)
        if key not in self:
            raise RegistryError(f"no mask head registered for class {class_id}")
        return self[key]

    @property
    def class_ids(self) -> list:
        return sorted(int(k) for k in self.keys())

    def validate(self, num_classes: int) -> None:
        if self.class_ids != list(range(1, num_classes + 1)):
            raise RegistryError(
                f"registry covers classes {self.class_ids}, catalog expects 1..{num_classes}"
            )
        seen = {}
        for key, head in self.items():
            for pname, p in head.named_parameters():
                ptr = p.data_ptr()
                if ptr in seen:
                    raise RegistryError(
                        f"heads {seen[ptr]} and {key} alias parameter storage ({pname})"
                    )
                seen[ptr] = key


class SwitchSplitModel(nn.Module):
    """Frozen detection base plus the per-class head registry."""

    def __init__(
        self,
        config: PipelineConfig,
        backbone: nn.Module,
        proposal: nn.Module,
        cls: nn.Module,
        box: nn.Module,
        registry: HeadRegistry,
        provenance: dict | None = None,
    ):
        super().__init__()
        self.config = config
        self.backbone = backbone
        self.proposal = proposal
        self.cls = cls
        self.box = box
        self.heads = registry
        self.provenance = dict(provenance or {})
        registry.validate(config.num_classes)
        for sub in (self.backbone, self.proposal, self.cls, self.box):
            sub.requires_grad_(False)

    @property
    def registry(self) -> HeadRegistry:
        return self.heads

    def backbone_forward(self, image: np.ndarray) -> FeatureMap:
        t = image_to_tensor(image, self.config)
        with torch.no_grad():
            fm = self.backbone(t.unsqueeze(0))[0]
        if not torch.isfinite(fm).all():
            raise PipelineError("backbone produced non-finite activations")
        return FeatureMap(tensor=fm, stride=self.config.stride)


def route(dist) -> Optional[int]:
    """Turn the switch: argmax over the full distribution, background rejects,
    ties break toward the lowest class id. Returns the class id or None."""
    d = validate_distribution(np.asarray(dist, dtype=np.float64))
    c = argmax_lowest(d)
    return None if c == 0 else c


def surgery(baseline: PipelineModel, init: str = "slice", seed: int = 0) -> SwitchSplitModel:
    """Convert a baseline model: drop the shared mask head, freeze everything
    else, and install one single-class head per catalog entry.

    init="slice" reuses the shared head (trunk copied, final layer sliced to
    the owning class's channel); init="fresh" randomizes each head.
    """
    if not isinstance(getattr(baseline, "mask", None), nn.Module):
        raise SurgeryError("baseline model has no multi-class mask head to replace")
    if init not in ("slice", "fresh"):
        raise SurgeryError(f"unknown surgery init {init!r}")
    cfg = baseline.config
    n = cfg.num_classes
    if baseline.mask.logits.out_channels != n:
        raise SurgeryError(
            f"baseline mask head emits {baseline.mask.logits.out_channels} channels "
            f"but the catalog has {n} classes"
        )
    source_digest = payload_digest(params_from_model(baseline))
    heads = {}
    for c in range(1, n + 1):
        heads[c] = sliced_head(baseline, c) if init == "slice" else fresh_head(cfg, c, seed)
    model = SwitchSplitModel(
        config=cfg,
        backbone=copy.deepcopy(baseline.backbone),
        proposal=copy.deepcopy(baseline.proposal),
        cls=copy.deepcopy(baseline.cls),
        box=copy.deepcopy(baseline.box),
        registry=HeadRegistry(heads),
        provenance={"source_digest": source_digest, "init": init, "head_training": {}},
    )
    return model


def switch_model_from_record(record: CheckpointRecord) -> SwitchSplitModel:
    """Rebuild a switch-split model from its checkpoint record."""
    if record.kind != "switch_split":
        raise SwitchSplitError(f"expected a switch_split checkpoint, got kind={record.kind!r}")
    cfg = record.config
    registry = HeadRegistry(
        {c: SingleClassMaskHead(cfg, c) for c in range(1, cfg.num_classes + 1)}
    )
    model = SwitchSplitModel(
        config=cfg,
        backbone=Backbone(cfg),
        proposal=RpnHead(cfg),
        cls=ClsHead(cfg),
        box=BoxHead(cfg),
        registry=registry,
        provenance=record.provenance,
    )
    load_params_into_model(record.params, model)
    return model


@dataclass
class DispatchRecord:
    """One routed ROI: which head served it and from which refined box."""

    roi_index: int
    routed_class: int
    box: Box
    score: float
    distribution: np.ndarray


def _mask_detections(model, fm: FeatureMap, boxes: np.ndarray, classes, scores, dists, keep) -> tuple:
    """Run per-class heads on the surviving refined boxes and paste masks."""
    cfg = model.config
    detections: list = []
    records: list = []
    if keep.size == 0:
        return detections, records
    roi14 = roi_align(fm, boxes[keep], cfg.roi_size_mask)
    probs_per_row = [None] * keep.size
    routed = []
    for row, i in enumerate(keep):
        c = route(dists[i])
        if c is None:  # survivors are foreground-argmax by construction
            raise SwitchSplitError("routing rejected a surviving foreground ROI")
        routed.append(c)
    for c in sorted(set(routed)):
        head = model.heads.head_for(c)
        rows = [r for r, rc in enumerate(routed) if rc == c]
        with torch.no_grad():
            logits = head(roi14[rows])
        for j, r in enumerate(rows):
            probs_per_row[r] = torch.sigmoid(logits[j, 0]).numpy()
    for row, i in enumerate(keep):
        c = routed[row]
        box = Box(*boxes[i])
        prob_map = paste_mask(probs_per_row[row], box, cfg.image_size)
        detections.append(
            Detection(box=box, class_id=c, score=float(scores[i]), mask=prob_map >= 0.5, mask_prob=prob_map)
        )
        records.append(
            DispatchRecord(
                roi_index=int(i), routed_class=c, box=box, score=float(scores[i]), distribution=dists[i]
            )
        )
    return detections, records


def switch_inference(
    model: SwitchSplitModel,
    image: np.ndarray,
    score_thresh: float = 0.5,
    max_dets: int = 20,
    proposals: Optional[np.ndarray] = None,
    return_dispatch: bool = False,
):
    """Switch-split counterpart of the baseline forward pass: identical up to
    refined boxes and classification, then each surviving ROI is dispatched
    via :func:`route` to exactly one single-class head."""
    cfg = model.config
    fm = model.backbone_forward(image)
    if proposals is None:
        proposals, _ = propose_regions(model, fm, mode="learned", k=cfg.proposal_count)
    dists, refined, cls_ids, scores = refine_rois(model, fm, proposals)
    keep = select_detections(refined, cls_ids, scores, score_thresh, cfg.detection_nms_iou, max_dets)
    detections, records = _mask_detections(model, fm, refined, cls_ids, scores, dists, keep)
    if return_dispatch:
        return detections, records
    return detections


# ---------------------------------------------------------------------------
# cascade wiring
# ---------------------------------------------------------------------------


@dataclass
class CascadeStage:
    cls: ClsHead
    box: BoxHead
    registry: HeadRegistry
    iou_thresh: float


class CascadeModel(nn.Module):
    """Multi-stage box refinement, each stage feeding its own switch-split."""

    def __init__(self, config: PipelineConfig, backbone, proposal, stages: Sequence[CascadeStage]):
        super().__init__()
        if len(stages) < 2:
            raise SwitchSplitError(
                f"a cascade needs at least 2 stages, got {len(stages)}; use switch_inference"
            )
        self.config = config
        self.backbone = backbone
        self.proposal = proposal
        self.stage_modules = nn.ModuleList()
        self._stages = list(stages)
        for s in stages:
            self.stage_modules.append(nn.ModuleDict({"cls": s.cls, "box": s.box, "heads": s.registry}))
            s.registry.validate(config.num_classes)

    @property
    def stages(self) -> list:
        return self._stages

    @property
    def heads(self) -> HeadRegistry:
        return self._stages[-1].registry

    def backbone_forward(self, image: np.ndarray) -> FeatureMap:
        t = image_to_tensor(image, self.config)
        with torch.no_grad():
            fm = self.backbone(t.unsqueeze(0))[0]
        return FeatureMap(tensor=fm, stride=self.config.stride)


def build_cascade(
    model: SwitchSplitModel, num_stages: int = 3, stage_ious: tuple = (0.5, 0.6, 0.7)
) -> CascadeModel:
    """Replicate a switch-split model's heads into `num_stages` cascade stages.

    Stages start as deep copies of the trained heads; the recorded per-stage
    IoU thresholds describe the intended matching regime of each refinement
    stage."""
    if num_stages < 2:
        raise SwitchSplitError(f"a cascade needs at least 2 stages, got {num_stages}")
    if len(stage_ious) < num_stages:
        raise SwitchSplitError(f"need one IoU threshold per stage, got {stage_ious}")
    stages = []
    for t in range(num_stages):
        stages.append(
            CascadeStage(
                cls=copy.deepcopy(model.cls),
                box=copy.deepcopy(model.box),
                registry=HeadRegistry(
                    {c: copy.deepcopy(model.heads.head_for(c)) for c in model.heads.class_ids}
                ),
                iou_thresh=float(stage_ious[t]),
            )
        )
    return CascadeModel(model.config, copy.deepcopy(model.backbone), copy.deepcopy(model.proposal), stages)


def cascade_forward(
    model: CascadeModel,
    image: np.ndarray,
    score_thresh: float = 0.5,
    max_dets: int = 20,
    proposals: Optional[np.ndarray] = None,
    return_details: bool = False,
):
    """Run the cascade: stage t re-classifies and refines stage t-1's boxes
    (stage 1 starts from the proposals). Final boxes are the last stage's,
    classification is the renormalized arithmetic mean of the per-stage
    distributions, and masks come from the last stage's head registry."""
    cfg = model.config
    fm = model.backbone_forward(image)
    if proposals is None:
        proposals, _ = propose_regions(model, fm, mode="learned", k=cfg.proposal_count)
    boxes = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return ([], {"stage_boxes": [], "stage_dists": []}) if return_details else []
    stage_boxes = []
    stage_dists = []
    for stage_mod in model.stage_modules:
        stage_view = _StageView(cfg, stage_mod["cls"], stage_mod["box"])
        dists, refined, _cls_ids, _scores = refine_rois(stage_view, fm, boxes)
        stage_dists.append(dists)
        stage_boxes.append(refined)
        boxes = refined
    ensemble = np.mean(np.stack(stage_dists), axis=0)
    ensemble = ensemble / ensemble.sum(axis=1, keepdims=True)
    cls_ids = np.array([argmax_lowest(row) for row in ensemble], dtype=np.int64)
    scores = ensemble[np.arange(ensemble.shape[0]), cls_ids]
    keep = select_detections(boxes, cls_ids, scores, score_thresh, cfg.detection_nms_iou, max_dets)
    last = model.stages[-1]
    view = _RegistryView(cfg, last.registry)
    detections, _records = _mask_detections(view, fm, boxes, cls_ids, scores, ensemble, keep)
    if return_details:
        return detections, {"stage_boxes": stage_boxes, "stage_dists": stage_dists, "ensemble": ensemble}
    return detections


@dataclass
class _StageView:
    """Duck-typed adapter so refine_rois can serve one cascade stage."""

    config: PipelineConfig
    cls: ClsHead
    box: BoxHead


@dataclass
class _RegistryView:
    config: PipelineConfig
    heads: HeadRegistry
