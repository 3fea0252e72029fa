"""Command-line orchestration of the full workflow.

Subcommands: generate, train-baseline, surgery, train-heads, evaluate,
compare, rerun. Every command resolves its configuration with precedence
flag > --config file > default, writes its artifact, and emits a
RunManifest JSON capturing the resolved configuration, input digests,
output digests, seed, and wall clock — enough to reproduce the run
bit-for-bit with `splitmask rerun`.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training divergence,
5 incomparable reports, 1 other failure (including rerun mismatches).
The SPLITMASK_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import torch

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_INCOMPARABLE = 5


def _out_root() -> Path:
    return Path(os.environ.get("SPLITMASK_OUT", "runs"))


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dataset_dir_digest(root: Path) -> str:
    from splitmask.shapesynth import dataset_digest, read_annotations

    h = hashlib.sha256()
    for split in ("train", "val"):
        d = root / split
        if d.exists():
            h.update(split.encode())
            h.update(dataset_digest(read_annotations(d)).encode())
    return h.hexdigest()


def _write_manifest(path: Path, command: str, resolved: dict, inputs: dict, outputs: dict, t0: float, seed) -> None:
    manifest = {
        "command": command,
        "resolved_config": resolved,
        "input_digests": inputs,
        "output_paths": sorted(outputs),
        "output_digests": outputs,
        "seed": seed,
        "wall_clock_sec": round(time.time() - t0, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _merge(flag_values: dict, file_values: dict, defaults: dict) -> dict:
    """Precedence: explicit flag > config file > default."""
    out = dict(defaults)
    for k, v in file_values.items():
        if k not in out:
            raise SystemExit(f"unknown config key {k!r} (expected one of {sorted(out)})")
        out[k] = v
    for k, v in flag_values.items():
        if v is not None:
            out[k] = v
    return out


def _load_config_file(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    return json.loads(p.read_text())


def _dataclass_fields(cls) -> dict:
    return {f.name: f.default if f.default is not dataclasses.MISSING else None for f in dataclasses.fields(cls)}


# ---------------------------------------------------------------------------
# command implementations (driven purely by a resolved-config dict)
# ---------------------------------------------------------------------------


def run_generate(resolved: dict) -> tuple:
    from splitmask.shapesynth import DatasetSpec, dataset_digest, generate_split, write_annotations

    spec = DatasetSpec(
        num_classes=resolved["classes"],
        samples_per_split={"train": resolved["train"], "val": resolved["val"]},
        image_size=resolved["image_size"],
        min_instances=resolved["min_instances"],
        max_instances=resolved["max_instances"],
        occlusion_allowed=resolved["occlusion"],
        rare_class=resolved["rare_class"],
        rare_class_weight=resolved["rare_class_weight"],
        seed=resolved["seed"],
    )
    out = Path(resolved["out"])
    inputs: dict = {}
    outputs: dict = {}
    counts = {}
    for split in ("train", "val"):
        samples = generate_split(spec, split)
        write_annotations(samples, out / split)
        outputs[f"{split}"] = dataset_digest(samples)
        from splitmask.shapesynth import per_class_instance_counts

        counts[split] = per_class_instance_counts(samples, spec.num_classes)
    print(f"wrote dataset to {out}")
    for split, c in counts.items():
        print(f"  {split}: per-class instance counts {c}")
    return inputs, outputs, out / "manifest.json"


def _load_train_config(resolved: dict):
    from splitmask.train import TrainConfig

    keys = _dataclass_fields(TrainConfig)
    return TrainConfig(**{k: resolved[k] for k in keys})


def run_train_baseline(resolved: dict) -> tuple:
    from splitmask.checkpoint import save_checkpoint
    from splitmask.pipeline import PipelineConfig
    from splitmask.shapesynth import read_annotations
    from splitmask.train import train_baseline

    data = Path(resolved["data"])
    train_samples = read_annotations(data / "train")
    val_samples = read_annotations(data / "val")
    model_config = PipelineConfig(num_classes=resolved["classes"], image_size=resolved["image_size"])
    config = _load_train_config(resolved)
    _model, record = train_baseline(
        train_samples, val_samples, model_config, config, progress=lambda s: print(s, flush=True)
    )
    out = Path(resolved["out"])
    digest = save_checkpoint(record, out)
    log_path = out.with_suffix(out.suffix + ".metrics.jsonl")
    with open(log_path, "w") as f:
        for row in record.meta["metric_log"]:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"checkpoint {out} (digest {digest[:12]}), {record.meta['epochs_run']} epochs")
    inputs = {"data": _dataset_dir_digest(data)}
    outputs = {"checkpoint": digest, "metrics_log": _sha256_file(log_path)}
    return inputs, outputs, out.with_suffix(out.suffix + ".manifest.json")


def run_surgery(resolved: dict) -> tuple:
    from splitmask.checkpoint import baseline_model_from_record, load_checkpoint, record_from_model, save_checkpoint
    from splitmask.switch_split import surgery

    ckpt = load_checkpoint(resolved["checkpoint"])
    baseline = baseline_model_from_record(ckpt)
    model = surgery(baseline, init=resolved["init"], seed=resolved["seed"])
    record = record_from_model(
        model,
        kind="switch_split",
        meta=dict(ckpt.meta),
        provenance=model.provenance,
        class_names=ckpt.class_names,
    )
    out = Path(resolved["out"])
    digest = save_checkpoint(record, out)
    print(f"switch-split checkpoint {out} (digest {digest[:12]}), init={resolved['init']}")
    inputs = {"checkpoint": ckpt.digest}
    outputs = {"checkpoint": digest}
    return inputs, outputs, out.with_suffix(out.suffix + ".manifest.json")


def run_train_heads(resolved: dict) -> tuple:
    from splitmask.checkpoint import load_checkpoint, record_from_model, save_checkpoint
    from splitmask.shapesynth import read_annotations
    from splitmask.switch_split import switch_model_from_record
    from splitmask.train import train_all_heads

    ckpt = load_checkpoint(resolved["checkpoint"])
    model = switch_model_from_record(ckpt)
    data = Path(resolved["data"])
    samples = read_annotations(data / "train")
    config = _load_train_config(resolved)
    classes = resolved["head_classes"]
    if classes in (None, "all"):
        class_list = None
    else:
        class_list = [int(c) for c in str(classes).split(",")]
    _registry, metrics = train_all_heads(
        model, class_list, samples, config, mode=resolved["mode"], jobs=resolved["jobs"]
    )
    provenance = dict(model.provenance)
    provenance["head_training"] = {str(c): m for c, m in metrics.items()}
    record = record_from_model(
        model, kind="switch_split", meta=dict(ckpt.meta), provenance=provenance, class_names=ckpt.class_names
    )
    out = Path(resolved["out"])
    digest = save_checkpoint(record, out)
    for c, m in sorted(metrics.items()):
        print(
            f"head {c}: probe loss {m['probe_loss_init']:.2f} -> {m['probe_loss_final']:.2f} "
            f"({m['positive_rois']} positive ROIs)"
        )
    print(f"trained heads checkpoint {out} (digest {digest[:12]})")
    inputs = {"checkpoint": ckpt.digest, "data": _dataset_dir_digest(data)}
    outputs = {"checkpoint": digest}
    return inputs, outputs, out.with_suffix(out.suffix + ".manifest.json")


def run_evaluate(resolved: dict) -> tuple:
    from splitmask.checkpoint import baseline_model_from_record, load_checkpoint
    from splitmask.evalkit import EvalHalf, evaluate_per_class, misrouting_rate, save_eval_half
    from splitmask.shapesynth import dataset_digest, read_annotations
    from splitmask.switch_split import SwitchSplitModel, switch_model_from_record
    from splitmask.train import TrainConfig, infer_sample

    ckpt = load_checkpoint(resolved["checkpoint"])
    if ckpt.kind == "baseline":
        model = baseline_model_from_record(ckpt)
    else:
        model = switch_model_from_record(ckpt)
    data = Path(resolved["data"])
    samples = read_annotations(data / resolved["split"])
    config = TrainConfig(
        proposal_mode=resolved["proposal_mode"],
        eval_score_thresh=resolved["score_thresh"],
        eval_max_dets=resolved["max_dets"],
        seed=resolved["seed"],
    )
    cache: dict = {}

    def infer(sample):
        if sample.sample_id not in cache:
            cache[sample.sample_id] = infer_sample(model, sample, config)
        return cache[sample.sample_id]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_class = evaluate_per_class(samples, infer, model.config.num_classes)
    half = EvalHalf(
        model_tag=resolved["tag"] or ckpt.kind,
        dataset_digest=dataset_digest(samples),
        per_class=per_class,
        class_names={i + 1: n for i, n in enumerate(ckpt.class_names)},
    )
    out = Path(resolved["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_eval_half(half, out)
    for c, b in sorted(per_class.items()):
        name = half.class_names.get(c, f"class{c}")
        ap = "--" if b.ap is None else f"{b.ap:.3f}"
        print(f"  {name:<10} mask AP {ap}")
    outputs = {"report": _sha256_file(out)}
    if isinstance(model, SwitchSplitModel):
        props = None
        if resolved["proposal_mode"] == "gt_jitter":
            from splitmask.train import jitter_eval_proposals

            props = [jitter_eval_proposals(s, config, model.config.image_size) for s in samples]
        mr = misrouting_rate(model, samples, score_thresh=resolved["score_thresh"], proposals_per_sample=props)
        side = out.with_suffix(out.suffix + ".misrouting.json")
        side.write_text(
            json.dumps(
                {
                    "rate": mr.rate,
                    "dispatched": mr.dispatched,
                    "matched": mr.matched,
                    "mismatched": mr.mismatched,
                    "background_fp": mr.background_fp,
                },
                indent=2,
                sort_keys=True,
            )
        )
        outputs["misrouting"] = _sha256_file(side)
        rate = "undefined" if mr.rate is None else f"{mr.rate:.4f}"
        print(f"  misrouting rate {rate} ({mr.background_fp} background FPs)")
    print(f"report {out}")
    inputs = {"checkpoint": ckpt.digest, "data": _dataset_dir_digest(data)}
    return inputs, outputs, out.with_suffix(out.suffix + ".manifest.json")


def run_compare(resolved: dict) -> tuple:
    from splitmask.evalkit import compare_reports, load_eval_half, plot_comparison, render_csv, render_table

    before = load_eval_half(resolved["before"])
    after = load_eval_half(resolved["after"])
    report = compare_reports(before, after)
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (out_dir / "comparison.txt").write_text(table + "\n")
    (out_dir / "comparison.csv").write_text(render_csv(report))
    doc = {
        "before": before.to_json(),
        "after": after.to_json(),
        "deltas": {str(c): d for c, d in report.deltas.items()},
        "mean_ap_delta": report.mean_ap_delta,
    }
    (out_dir / "comparison.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    plot_path = out_dir / "comparison.png"
    plot_comparison({after.model_tag: report}, plot_path)
    print(table)
    delta = report.mean_ap_delta
    print(f"\nmean mask AP delta: {'--' if delta is None else f'{delta:+.4f}'}")
    inputs = {"before": _sha256_file(resolved["before"]), "after": _sha256_file(resolved["after"])}
    outputs = {
        "comparison.txt": _sha256_file(out_dir / "comparison.txt"),
        "comparison.csv": _sha256_file(out_dir / "comparison.csv"),
        "comparison.json": _sha256_file(out_dir / "comparison.json"),
        "comparison.png": _sha256_file(plot_path),
    }
    return inputs, outputs, out_dir / "manifest.json"


_RUNNERS = {
    "generate": run_generate,
    "train-baseline": run_train_baseline,
    "surgery": run_surgery,
    "train-heads": run_train_heads,
    "evaluate": run_evaluate,
    "compare": run_compare,
}

# output-path keys inside resolved configs, per command (rerun rewrites them)
_OUT_KEYS = {name: ("out",) for name in _RUNNERS}


def run_rerun(manifest_path: str, out: str) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    command = manifest["command"]
    if command not in _RUNNERS:
        print(f"manifest names unknown command {command!r}", file=sys.stderr)
        return 1
    resolved = dict(manifest["resolved_config"])
    for key in _OUT_KEYS[command]:
        resolved[key] = out
    t0 = time.time()
    _inputs, outputs, mpath = _RUNNERS[command](resolved)
    _write_manifest(mpath, command, resolved, _inputs, outputs, t0, resolved.get("seed"))
    recorded = manifest["output_digests"]
    ok = True
    for key in sorted(set(recorded) | set(outputs)):
        a, b = recorded.get(key), outputs.get(key)
        status = "OK" if a == b else "MISMATCH"
        ok &= a == b
        print(f"{status:<10} {key}: {str(a)[:12]} vs {str(b)[:12]}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--head-epochs", dest="head_epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--proposal-mode", dest="proposal_mode", choices=("gt_jitter", "learned"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitmask",
        description="Desk-scale instance segmentation lab: shared mask head vs per-class switch-split heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--min-instances", dest="min_instances", type=int, default=None)
    p.add_argument("--max-instances", dest="max_instances", type=int, default=None)
    p.add_argument("--no-occlusion", dest="occlusion", action="store_false", default=None)
    p.add_argument("--rare-class", dest="rare_class", type=int, default=None)
    p.add_argument("--rare-class-weight", dest="rare_class_weight", type=float, default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("train-baseline", help="train the baseline model to plateau")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    _add_train_flags(p)
    p.add_argument("--config", default=None)

    p = sub.add_parser("surgery", help="replace the shared mask head with per-class heads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--init", choices=("slice", "fresh"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("train-heads", help="train per-class mask heads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--classes", dest="head_classes", default=None, help="'all' or comma list, e.g. 1,3")
    p.add_argument("--mode", choices=("sequential", "parallel"), default=None)
    p.add_argument("--jobs", type=int, default=None)
    _add_train_flags(p)
    p.add_argument("--config", default=None)

    p = sub.add_parser("evaluate", help="per-class mask AP on validation sub-datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--score-thresh", dest="score_thresh", type=float, default=None)
    p.add_argument("--max-dets", dest="max_dets", type=int, default=None)
    p.add_argument("--proposal-mode", dest="proposal_mode", choices=("gt_jitter", "learned"), default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("compare", help="before/after comparison table and chart")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("rerun", help="re-execute a command from its manifest and verify digests")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _defaults_for(command: str) -> dict:
    from splitmask.train import TrainConfig

    train_defaults = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}
    root = _out_root()
    if command == "generate":
        return {
            "out": str(root / "dataset"),
            "classes": 5,
            "train": 500,
            "val": 100,
            "seed": 0,
            "image_size": 128,
            "min_instances": 1,
            "max_instances": 4,
            "occlusion": True,
            "rare_class": None,
            "rare_class_weight": 0.25,
        }
    if command == "train-baseline":
        return {
            "data": None,
            "out": str(root / "baseline.ckpt"),
            "classes": 5,
            "image_size": 128,
            **train_defaults,
        }
    if command == "surgery":
        return {"checkpoint": None, "out": str(root / "switchsplit.ckpt"), "init": "slice", "seed": 0}
    if command == "train-heads":
        return {
            "checkpoint": None,
            "data": None,
            "out": str(root / "switchsplit_trained.ckpt"),
            "head_classes": "all",
            "mode": "sequential",
            "jobs": None,
            **train_defaults,
        }
    if command == "evaluate":
        return {
            "checkpoint": None,
            "data": None,
            "out": str(root / "report.json"),
            "split": "val",
            "tag": None,
            "seed": 0,
            "score_thresh": 0.05,  # AP ranks detections, so keep low-score ones
            "max_dets": 20,
            "proposal_mode": "gt_jitter",
        }
    if command == "compare":
        return {"before": None, "after": None, "out": str(root / "comparison")}
    raise KeyError(command)


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    if command == "rerun":
        return run_rerun(args.manifest, args.out)

    flag_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = _load_config_file(getattr(args, "config", None))
        resolved = _merge(flag_values, file_values, _defaults_for(command))
        for key in ("data", "checkpoint", "before", "after"):
            if key in resolved and resolved[key] is None:
                parser.error(f"--{key} is required for {command}")
        t0 = time.time()
        inputs, outputs, manifest_path = _RUNNERS[command](resolved)
        _write_manifest(manifest_path, command, resolved, inputs, outputs, t0, resolved.get("seed"))
        print(f"manifest {manifest_path}")
        return EXIT_OK
    except SystemExit:
        raise
    except Exception as e:  # map failures onto the documented exit codes
        from splitmask.evalkit import IncomparableReportsError
        from splitmask.shapesynth import DataError
        from splitmask.train import EmptyClassError, PerClassTrainingError, TrainingDivergedError

        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, (DataError, FileNotFoundError)):
            return EXIT_DATA
        if isinstance(e, TrainingDivergedError):
            return EXIT_DIVERGED
        if isinstance(e, PerClassTrainingError):
            cause = e.__cause__
            if isinstance(cause, TrainingDivergedError):
                return EXIT_DIVERGED
            return EXIT_DATA if isinstance(cause, EmptyClassError) else 1
        if isinstance(e, EmptyClassError):
            return EXIT_DATA
        if isinstance(e, IncomparableReportsError):
            return EXIT_INCOMPARABLE
        return 1


if __name__ == "__main__":
    sys.exit(main())
