#!/usr/bin/env python3
"""Scratch sweep for optimization settings (not part of the deliverable runs)."""
import dataclasses
import json
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

from splitmask.pipeline import PipelineConfig
from splitmask.shapesynth import DatasetSpec, generate_split
from splitmask.train import TrainConfig, train_baseline, validation_mask_map

variant = sys.argv[1]
spec = DatasetSpec(samples_per_split={"train": 300, "val": 80}, seed=0)
train_s = generate_split(spec, "train")
val_s = generate_split(spec, "val")
mc = PipelineConfig()

settings = {
    "clip2": dict(grad_clip=2.0, epochs=20),
    "clip4": dict(grad_clip=4.0, epochs=20),
    "lr02": dict(lr=0.02, grad_clip=1.0, epochs=20),
    "long": dict(grad_clip=1.0, epochs=24),
    "clip2rare": dict(grad_clip=2.0, epochs=20),
}
kw = settings[variant]
if variant == "clip2rare":
    spec = DatasetSpec(samples_per_split={"train": 300, "val": 80}, seed=0, rare_class_weight=0.4)
    train_s = generate_split(spec, "train")
    val_s = generate_split(spec, "val")

tc = TrainConfig(seed=0, plateau_warmup=100, **kw)  # warmup high: no early stop in the sweep
t0 = time.time()
model, rec = train_baseline(train_s, val_s, mc, tc, progress=lambda s: print(f"[{variant}] {s}", flush=True))
print(f"[{variant}] done in {time.time()-t0:.0f}s")
print(f"[{variant}] last losses:", {k: round(v, 3) for k, v in rec.meta["metric_log"][-1]["loss"].items()})
print(f"[{variant}] history:", [round(h, 4) for h in rec.meta["metric_history"]])
