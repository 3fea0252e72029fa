#!/usr/bin/env python3
"""Before/after study: shared mask head vs per-class switch-split heads.

For each seed: generate the 5-class dataset, train the baseline to plateau,
evaluate per-class mask AP, apply surgery + per-class head training, re-run
the same evaluation, and report deltas. Everything runs in-process through
the library; artifacts land under --out.
"""

from __future__ import annotations

import argparse
import json
import time
import warnings
from pathlib import Path

import numpy as np
import torch


def run_seed(seed: int, args, out_dir: Path) -> dict:
    from splitmask.evalkit import EvalHalf, compare_reports, evaluate_per_class, render_table, save_eval_half
    from splitmask.pipeline import PipelineConfig
    from splitmask.shapesynth import SHAPE_NAMES, DatasetSpec, dataset_digest, generate_split
    from splitmask.switch_split import surgery
    from splitmask.train import TrainConfig, infer_sample, train_all_heads, train_baseline

    spec = DatasetSpec(
        num_classes=args.classes,
        samples_per_split={"train": args.train, "val": args.val},
        seed=seed,
    )
    train_samples = generate_split(spec, "train")
    val_samples = generate_split(spec, "val")
    model_config = PipelineConfig(num_classes=args.classes)
    config = TrainConfig(seed=seed, epochs=args.epochs, head_epochs=args.head_epochs)

    t0 = time.time()
    baseline, record = train_baseline(
        train_samples, val_samples, model_config, config,
        progress=lambda s: print(f"  [seed {seed}] {s}", flush=True),
    )
    print(f"  [seed {seed}] baseline trained in {time.time() - t0:.0f}s "
          f"({record.meta['epochs_run']} epochs)")

    names = {i + 1: n for i, n in enumerate(SHAPE_NAMES[: args.classes])}
    digest = dataset_digest(val_samples)

    def eval_half(model, tag: str) -> EvalHalf:
        cache = {}

        def infer(sample):
            if sample.sample_id not in cache:
                cache[sample.sample_id] = infer_sample(model, sample, config)
            return cache[sample.sample_id]

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            per_class = evaluate_per_class(val_samples, infer, args.classes)
        return EvalHalf(model_tag=tag, dataset_digest=digest, per_class=per_class, class_names=names)

    before = eval_half(baseline, "baseline")

    model = surgery(baseline, init="slice")
    t0 = time.time()
    _registry, metrics = train_all_heads(model, None, train_samples, config, mode=args.mode)
    print(f"  [seed {seed}] heads trained in {time.time() - t0:.0f}s")
    for c, m in sorted(metrics.items()):
        print(f"    head {c} ({names[c]}): probe loss {m['probe_loss_init']:.1f} -> {m['probe_loss_final']:.1f}")

    after = eval_half(model, "switch-split")
    report = compare_reports(before, after)

    seed_dir = out_dir / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_eval_half(before, seed_dir / "before.json")
    save_eval_half(after, seed_dir / "after.json")
    (seed_dir / "comparison.txt").write_text(render_table(report) + "\n")
    print(render_table(report))

    per_class_delta = {c: report.deltas[c]["ap"] for c in report.classes}
    improved = sum(1 for d in per_class_delta.values() if d is not None and d > 0)
    result = {
        "seed": seed,
        "mean_ap_delta": report.mean_ap_delta,
        "per_class_ap_delta": per_class_delta,
        "classes_improved": improved,
        "epochs_run": record.meta["epochs_run"],
    }
    print(f"  [seed {seed}] mean AP delta {report.mean_ap_delta:+.4f}, "
          f"{improved}/{args.classes} classes improved")
    return result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--classes", type=int, default=5)
    parser.add_argument("--train", type=int, default=500)
    parser.add_argument("--val", type=int, default=100)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--head-epochs", dest="head_epochs", type=int, default=4)
    parser.add_argument("--mode", choices=("sequential", "parallel"), default="parallel")
    parser.add_argument("--out", default="runs/study")
    args = parser.parse_args()

    torch.set_num_threads(1)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    wall0 = time.time()
    for seed in args.seeds:
        print(f"=== seed {seed} ===", flush=True)
        results.append(run_seed(seed, args, out_dir))
    summary = {
        "results": results,
        "seeds_mean_improved": sum(1 for r in results if r["mean_ap_delta"] and r["mean_ap_delta"] > 0),
        "wall_clock_sec": round(time.time() - wall0, 1),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
