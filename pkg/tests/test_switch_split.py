import copy

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from splitmask.checkpoint import (
    load_checkpoint,
    params_from_model,
    record_from_model,
    save_checkpoint,
)
from splitmask.core import argmax_lowest
from splitmask.pipeline import PipelineConfig, PipelineModel, baseline_inference
from splitmask.switch_split import (
    HeadRegistry,
    RegistryError,
    SingleClassMaskHead,
    SurgeryError,
    build_cascade,
    cascade_forward,
    fresh_head,
    route,
    surgery,
    switch_inference,
    switch_model_from_record,
    SwitchSplitError,
)
from splitmask.train import TrainConfig, jitter_eval_proposals


@pytest.fixture(scope="module")
def base_model():
    return PipelineModel(PipelineConfig(), seed=4)


@pytest.fixture(scope="module")
def sliced(base_model):
    return surgery(base_model, init="slice")


class TestRoute:
    def test_foreground_argmax(self):
        assert route(np.array([0.1, 0.7, 0.2])) == 1

    def test_background_rejects(self):
        assert route(np.array([0.9, 0.05, 0.05])) is None

    def test_tie_breaks_to_lowest_class(self):
        assert route(np.array([0.2, 0.4, 0.4])) == 1

    def test_malformed_raises(self):
        with pytest.raises(ValueError):
            route(np.array([0.2, 0.2, 0.2]))
        with pytest.raises(ValueError):
            route(np.array([-0.2, 0.6, 0.6]))

    @given(st.integers(0, 10**6), st.floats(0.1, 50.0))
    def test_argmax_invariance_under_rescaling(self, seed, scale):
        r = np.random.default_rng(seed)
        d = r.uniform(0.01, 1.0, size=int(r.integers(2, 8)))
        d /= d.sum()
        rescaled = d * scale
        rescaled /= rescaled.sum()
        assert route(d) == route(rescaled)


class TestSurgery:
    def test_registry_complete(self, sliced, base_model):
        n = base_model.config.num_classes
        assert sliced.heads.class_ids == list(range(1, n + 1))

    def test_slice_reproduces_multiclass_channels(self, base_model, sliced, rng):
        rois = torch.from_numpy(rng.normal(size=(4, 32, 14, 14)).astype(np.float32))
        with torch.no_grad():
            full = base_model.mask(rois)
            for c in sliced.heads.class_ids:
                single = sliced.heads.head_for(c)(rois)
                assert float((single[:, 0] - full[:, c - 1]).abs().max()) < 1e-6

    def test_mask_parameter_count(self, base_model, sliced):
        one_head = sum(p.numel() for p in sliced.heads.head_for(1).parameters())
        total = sum(p.numel() for p in sliced.heads.parameters())
        assert total == base_model.config.num_classes * one_head

    def test_surgery_deterministic(self, base_model):
        a = surgery(base_model, init="slice")
        b = surgery(base_model, init="slice")
        pa, pb = params_from_model(a), params_from_model(b)
        assert list(pa) == list(pb)
        for k in pa:
            assert np.array_equal(pa[k], pb[k]), k

    def test_fresh_deterministic_and_distinct(self, base_model):
        a = surgery(base_model, init="fresh", seed=3)
        b = surgery(base_model, init="fresh", seed=3)
        c = surgery(base_model, init="fresh", seed=4)
        pa, pb, pc = (params_from_model(x) for x in (a, b, c))
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)
        assert any(not np.array_equal(pa[k], pc[k]) for k in pa if k.startswith("heads/"))
        # fresh heads differ from each other (independent init per class)
        w1 = a.heads.head_for(1).logits.weight.detach().numpy()
        w2 = a.heads.head_for(2).logits.weight.detach().numpy()
        assert not np.array_equal(w1, w2)

    def test_base_frozen_and_bit_identical(self, base_model, sliced):
        src = params_from_model(base_model)
        dst = params_from_model(sliced)
        for name, arr in dst.items():
            if name.startswith("heads/"):
                continue
            assert np.array_equal(arr, src[name]), name
        for sub in (sliced.backbone, sliced.proposal, sliced.cls, sliced.box):
            assert all(not p.requires_grad for p in sub.parameters())

    def test_provenance_records_source(self, base_model, sliced):
        from splitmask.checkpoint import payload_digest

        assert sliced.provenance["source_digest"] == payload_digest(params_from_model(base_model))
        assert sliced.provenance["init"] == "slice"

    def test_unknown_init_rejected(self, base_model):
        with pytest.raises(SurgeryError):
            surgery(base_model, init="warmstart")

    def test_missing_mask_head_rejected(self, base_model):
        crippled = copy.deepcopy(base_model)
        crippled.mask = None
        with pytest.raises(SurgeryError):
            surgery(crippled)

    def test_class_count_mismatch_rejected(self, base_model):
        odd = copy.deepcopy(base_model)
        odd.mask.logits = torch.nn.Conv2d(odd.config.mask_channels, 3, 1)
        with pytest.raises(SurgeryError):
            surgery(odd)


class TestRegistry:
    def test_incomplete_rejected(self, base_model):
        cfg = base_model.config
        heads = {c: SingleClassMaskHead(cfg, c) for c in (1, 2, 4, 5)}
        with pytest.raises(RegistryError):
            HeadRegistry(heads).validate(cfg.num_classes)

    def test_aliased_parameters_rejected(self, base_model):
        cfg = base_model.config
        heads = {c: fresh_head(cfg, c, seed=0) for c in range(1, cfg.num_classes + 1)}
        heads[2].logits.weight = heads[1].logits.weight
        with pytest.raises(RegistryError):
            HeadRegistry(heads).validate(cfg.num_classes)

    def test_background_head_rejected(self, base_model):
        with pytest.raises(RegistryError):
            SingleClassMaskHead(base_model.config, 0)

    def test_mutating_one_head_leaves_others_byte_identical(self, base_model):
        model = surgery(base_model, init="slice")
        before = params_from_model(model)
        with torch.no_grad():
            for p in model.heads.head_for(3).parameters():
                p.add_(1.0)
        after = params_from_model(model)
        for name in before:
            if name.startswith("heads/3/"):
                assert not np.array_equal(before[name], after[name]), name
            else:
                assert np.array_equal(before[name], after[name]), name


class TestSwitchInference:
    def test_single_class_equivalence(self, tiny_val):
        cfg = PipelineConfig(num_classes=1)
        baseline = PipelineModel(cfg, seed=5)
        model = surgery(baseline, init="slice")
        tc = TrainConfig(seed=2)
        for s in tiny_val:
            props = jitter_eval_proposals(s, tc, cfg.image_size)
            d1 = baseline_inference(baseline, s.image, score_thresh=0.05, proposals=props)
            d2 = switch_inference(model, s.image, score_thresh=0.05, proposals=props)
            assert len(d1) == len(d2)
            for a, b in zip(d1, d2):
                assert a.class_id == b.class_id
                assert a.score == pytest.approx(b.score, abs=1e-9)
                assert float(np.abs(a.mask_prob - b.mask_prob).max()) < 1e-6

    def test_detection_class_equals_route(self, sliced, tiny_val):
        for s in tiny_val[:4]:
            dets, records = switch_inference(
                sliced, s.image, score_thresh=0.05, return_dispatch=True
            )
            assert len(dets) == len(records)
            for d, r in zip(dets, records):
                assert d.class_id == r.routed_class == route(r.distribution)

    def test_dispatch_histogram_matches_classifier_argmax(self, sliced, tiny_val):
        """Per-class dispatch counts equal the foreground argmax histogram of
        the surviving ROIs' distributions, recomputed independently."""
        dispatch_counts = {c: 0 for c in sliced.heads.class_ids}
        argmax_counts = {c: 0 for c in sliced.heads.class_ids}
        for s in tiny_val:
            _dets, records = switch_inference(
                sliced, s.image, score_thresh=0.05, return_dispatch=True
            )
            for r in records:
                dispatch_counts[r.routed_class] += 1
                argmax_counts[argmax_lowest(r.distribution)] += 1
        assert dispatch_counts == argmax_counts

    def test_missing_head_is_registry_violation(self, base_model, tiny_val):
        model = surgery(base_model, init="slice")
        del model.heads["3"]
        s = tiny_val[0]
        with pytest.raises((RegistryError, SwitchSplitError)):
            for img in tiny_val:
                switch_inference(model, img.image, score_thresh=0.01)

    def test_checkpoint_round_trip_preserves_outputs(self, sliced, tiny_val, tmp_path):
        record = record_from_model(sliced, kind="switch_split", provenance=sliced.provenance)
        save_checkpoint(record, tmp_path / "ss.ckpt")
        loaded = switch_model_from_record(load_checkpoint(tmp_path / "ss.ckpt"))
        s = tiny_val[0]
        a = switch_inference(sliced, s.image, score_thresh=0.05)
        b = switch_inference(loaded, s.image, score_thresh=0.05)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.box == y.box and x.score == y.score
            assert np.array_equal(x.mask, y.mask)


class TestCascade:
    def test_needs_two_stages(self, sliced):
        with pytest.raises(SwitchSplitError):
            build_cascade(sliced, num_stages=1)

    def test_degenerate_identity_cascade_equals_switch(self, base_model, tiny_val):
        model = surgery(base_model, init="slice")
        with torch.no_grad():  # identity deltas in every stage's box head
            model.box.out.weight.zero_()
            model.box.out.bias.zero_()
        cascade = build_cascade(model, num_stages=2, stage_ious=(0.5, 0.6))
        tc = TrainConfig(seed=3)
        for s in tiny_val[:6]:
            props = jitter_eval_proposals(s, tc, model.config.image_size)
            if props.shape[0] == 0:
                continue
            d1 = switch_inference(model, s.image, score_thresh=0.05, proposals=props)
            d2 = cascade_forward(cascade, s.image, score_thresh=0.05, proposals=props)
            assert len(d1) == len(d2)
            for a, b in zip(d1, d2):
                assert a.class_id == b.class_id
                assert a.box == b.box
                # ensemble renormalization differs from the raw softmax by f32 sum error
                assert a.score == pytest.approx(b.score, abs=1e-6)
                assert float(np.abs(a.mask_prob - b.mask_prob).max()) < 1e-6

    def test_ensemble_is_renormalized_mean(self, sliced, tiny_val):
        cascade = build_cascade(sliced, num_stages=3)
        s = tiny_val[0]
        tc = TrainConfig(seed=3)
        props = jitter_eval_proposals(s, tc, sliced.config.image_size)
        _dets, details = cascade_forward(
            cascade, s.image, score_thresh=0.05, proposals=props, return_details=True
        )
        stack = np.stack(details["stage_dists"])
        mean = stack.mean(axis=0)
        mean /= mean.sum(axis=1, keepdims=True)
        assert np.allclose(details["ensemble"], mean, atol=1e-12)
        assert len(details["stage_boxes"]) == 3

    def test_stage_heads_are_copies_not_aliases(self, sliced):
        cascade = build_cascade(sliced, num_stages=2)
        p1 = set(p.data_ptr() for p in cascade.stage_modules[0].parameters())
        p2 = set(p.data_ptr() for p in cascade.stage_modules[1].parameters())
        assert not (p1 & p2)
