"""Versioned binary checkpoint container.

Layout: magic, format version, header length, JSON header, then the raw
payload — every parameter as row-major little-endian float32, concatenated
in header order. The content digest is the SHA-256 of the payload bytes, so
freeze and isolation tests can compare parameter state byte-for-byte, and
save(load(x)) reproduces the digest exactly.

Parameter names are hierarchical `subhead/layer/tensor` paths; surgery and
the per-class registry extend the same scheme with `heads/<class_id>/...`
subtrees.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from splitmask.pipeline import PipelineConfig, PipelineModel, flat_params

_MAGIC = b"SSCK"
_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint files."""


@dataclass
class CheckpointRecord:
    """In-memory checkpoint: parameters plus config, metadata, and provenance."""

    params: "OrderedDict[str, np.ndarray]"
    config: PipelineConfig
    kind: str  # "baseline" | "switch_split"
    class_names: tuple = ()
    meta: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return payload_digest(self.params)

    def param_digest(self, name: str) -> str:
        return hashlib.sha256(self.params[name].tobytes()).hexdigest()


def payload_digest(params: "OrderedDict[str, np.ndarray]") -> str:
    h = hashlib.sha256()
    for arr in params.values():
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def params_from_model(model: torch.nn.Module) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, p in flat_params(model).items():
        out[name] = p.detach().cpu().numpy().astype("<f4", copy=True)
    return out


def record_from_model(
    model,
    kind: str,
    meta: dict | None = None,
    provenance: dict | None = None,
    class_names: tuple = (),
) -> CheckpointRecord:
    return CheckpointRecord(
        params=params_from_model(model),
        config=model.config,
        kind=kind,
        class_names=tuple(class_names),
        meta=dict(meta or {}),
        provenance=dict(provenance or {}),
    )


def load_params_into_model(params: "OrderedDict[str, np.ndarray]", model: torch.nn.Module) -> None:
    targets = flat_params(model)
    missing = set(targets) - set(params)
    extra = set(params) - set(targets)
    if missing or extra:
        raise CheckpointError(
            f"parameter name mismatch: missing {sorted(missing)[:3]}..., extra {sorted(extra)[:3]}..."
            if len(missing) + len(extra) > 6
            else f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    with torch.no_grad():
        for name, tensor in targets.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: file {arr.shape} vs model {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(arr.astype(np.float32, copy=True)))


def _config_to_json(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def _config_from_json(doc: dict) -> PipelineConfig:
    kwargs = dict(doc)
    for key in ("anchor_scales", "anchor_ratios"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return PipelineConfig(**kwargs)


def save_checkpoint(record: CheckpointRecord, path) -> str:
    """Write the container; returns the payload digest."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in record.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": record.kind,
        "config": _config_to_json(record.config),
        "class_names": list(record.class_names),
        "params": entries,
        "meta": record.meta,
        "provenance": record.provenance,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQ", _MAGIC, _FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return record.digest


def load_checkpoint(path) -> CheckpointRecord:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = struct.unpack_from("<4sIQ", raw, 0)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    payload = raw[16 + header_len :]
    params = OrderedDict()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        params[entry["name"]] = arr.copy()
    return CheckpointRecord(
        params=params,
        config=_config_from_json(header["config"]),
        kind=header["kind"],
        class_names=tuple(header["class_names"]),
        meta=header["meta"],
        provenance=header["provenance"],
    )


def baseline_model_from_record(record: CheckpointRecord) -> PipelineModel:
    if record.kind != "baseline":
        raise CheckpointError(f"expected a baseline checkpoint, got kind={record.kind!r}")
    model = PipelineModel(record.config, seed=0)
    load_params_into_model(record.params, model)
    return model
