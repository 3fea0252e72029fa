#!/usr/bin/env python3
"""Scratch: sweep head-training settings against one cached plateaued baseline."""
import dataclasses
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from splitmask.checkpoint import baseline_model_from_record, load_checkpoint, record_from_model, save_checkpoint
from splitmask.evalkit import EvalHalf, compare_reports, evaluate_per_class, mean_defined_ap
from splitmask.pipeline import PipelineConfig
from splitmask.shapesynth import DatasetSpec, dataset_digest, generate_split
from splitmask.switch_split import surgery
from splitmask.train import TrainConfig, infer_sample, train_all_heads, train_baseline

CKPT = Path("/tmp/exp_base.ckpt")
spec = DatasetSpec(samples_per_split={"train": 400, "val": 100}, seed=0, rare_class_weight=0.4)
train_s = generate_split(spec, "train")
val_s = generate_split(spec, "val")
mc = PipelineConfig()
base_tc = TrainConfig(seed=0, epochs=18)

if CKPT.exists():
    baseline = baseline_model_from_record(load_checkpoint(CKPT))
    print("loaded cached baseline")
else:
    t0 = time.time()
    baseline, rec = train_baseline(train_s, val_s, mc, base_tc, progress=print)
    save_checkpoint(rec, CKPT)
    print(f"baseline trained in {time.time()-t0:.0f}s, history {rec.meta['metric_history']}")


def eval_model(model, config):
    cache = {}

    def infer(s):
        if s.sample_id not in cache:
            cache[s.sample_id] = infer_sample(model, s, config)
        return cache[s.sample_id]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return evaluate_per_class(val_s, infer, 5)


before = eval_model(baseline, base_tc)
print("before per-class AP:", {c: None if b.ap is None else round(b.ap, 3) for c, b in before.items()})

variants = {
    "e24_c2": dict(head_epochs=24, grad_clip=2.0),
    "e24_c4_lr02": dict(head_epochs=24, grad_clip=4.0, lr=0.02),
    "e40_c4": dict(head_epochs=40, grad_clip=4.0),
}
which = sys.argv[1] if len(sys.argv) > 1 else None
for name, kw in variants.items():
    if which and name != which:
        continue
    tc = dataclasses.replace(base_tc, **kw)
    model = surgery(baseline, init="slice")
    t0 = time.time()
    _reg, metrics = train_all_heads(model, None, train_s, tc, mode="parallel")
    after = eval_model(model, tc)
    deltas = {
        c: None if (before[c].ap is None or after[c].ap is None) else round(after[c].ap - before[c].ap, 4)
        for c in before
    }
    improved = sum(1 for d in deltas.values() if d and d > 0)
    print(f"[{name}] {time.time()-t0:.0f}s; deltas {deltas}; improved {improved}/5")
    print(f"[{name}] probes:", {c: (round(m['probe_loss_init'],1), round(m['probe_loss_final'],1)) for c, m in metrics.items()})
