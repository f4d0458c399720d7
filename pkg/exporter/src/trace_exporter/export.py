"""Export instrumented model runs as JSONL trace files.

The trace format is the interchange contract with the policy simulator:
one profile record (model name, exit count, cumulative per-exit costs)
followed by one record per sample (per-exit confidences and predictions,
label, optional image reference).  This module runs a toy multi-exit
model over a synthetic dataset, collects those observations, validates
the result against the schema, and writes it atomically.

Difficulty is deliberately never filled in: scoring it belongs to the
consumer, which can recompute it from exported images.
"""
from __future__ import annotations

import json
import math
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import make_dataset, write_image
from .macs import cumulative_exit_macs
from .model import build_model

# bump applied when measured prefix times fail to increase with depth
_TIME_EPS_MS = 1e-6

_SPEC_KEYS = {
    "model", "dataset", "num_samples", "num_classes", "attachments",
    "energy_mj", "seed", "channels", "image_size", "time_ms", "head_dims",
    "export_images", "timing_repeats",
}


def _check_cumulative(name: str, values: list[float]) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if any(not math.isfinite(v) for v in out):
        raise ValueError(f"{name} contains a non-finite value")
    if out and out[0] <= 0.0:
        raise ValueError(f"{name} must start positive, got {out[0]}")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {list(out)}")
    return out


@dataclass(frozen=True)
class ExportSpec:
    """What to export: model, dataset, attachment points, and cost tables.

    ``energy_mj`` is required: energy is a physical measurement the
    exporter cannot derive, so the caller supplies the cumulative
    per-exit table.  ``time_ms`` is optional; when absent, wall time is
    measured per exit prefix (median over ``timing_repeats`` runs).
    """

    model: str
    dataset: str
    num_samples: int
    num_classes: int
    attachments: list[int]
    energy_mj: list[float]
    seed: int = 0
    channels: int = 1
    image_size: int = 16
    time_ms: list[float] | None = None
    head_dims: list[int] | None = None
    export_images: str | None = None
    timing_repeats: int = 5

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.attachments:
            raise ValueError("attachments must name at least one exit")
        if list(self.attachments) != sorted(set(self.attachments)):
            raise ValueError(f"attachments must be strictly increasing, "
                             f"got {self.attachments}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size < 2:
            raise ValueError(f"image_size must be >= 2, got {self.image_size}")
        if self.timing_repeats < 1:
            raise ValueError(f"timing_repeats must be >= 1, "
                             f"got {self.timing_repeats}")
        n = len(self.attachments)
        if len(self.energy_mj) != n:
            raise ValueError(f"energy_mj has {len(self.energy_mj)} entries, "
                             f"expected one per exit ({n})")
        _check_cumulative("energy_mj", self.energy_mj)
        if self.time_ms is not None:
            if len(self.time_ms) != n:
                raise ValueError(f"time_ms has {len(self.time_ms)} entries, "
                                 f"expected one per exit ({n})")
            _check_cumulative("time_ms", self.time_ms)
        if self.head_dims is not None and len(self.head_dims) != n:
            raise ValueError(f"head_dims has {len(self.head_dims)} entries, "
                             f"expected one per exit ({n})")


def load_spec(path: str | Path) -> ExportSpec:
    """Load an ExportSpec from a JSON file, rejecting unknown keys."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: spec must be a JSON object")
    unknown = set(obj) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown spec keys {sorted(unknown)}")
    missing = {"model", "dataset", "num_samples", "num_classes",
               "attachments", "energy_mj"} - set(obj)
    if missing:
        raise ValueError(f"{path}: missing required keys {sorted(missing)}")
    try:
        return ExportSpec(**obj)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def _measure_time_ms(model, sample: torch.Tensor, repeats: int) -> list[float]:
    """Median wall time per exit prefix, warmed up once, in milliseconds."""
    times = []
    with torch.no_grad():
        for i in range(len(model.attachments)):
            prefix = model.prefix(i)
            prefix(sample)  # warm-up, excluded from the median
            runs = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                prefix(sample)
                runs.append((time.perf_counter_ns() - t0) / 1e6)
            times.append(statistics.median(runs))
    return times


def _strictify(values: list[float]) -> list[float]:
    """Force a cost sequence positive and strictly increasing.

    Measured wall times are noisy at toy-model scale; a deeper prefix can
    tie or even beat a shallower one.  Costs in the trace must increase
    with depth, so ties are resolved with a minimal upward bump.
    """
    out = []
    floor = 0.0
    for v in values:
        v = max(v, floor + _TIME_EPS_MS)
        out.append(v)
        floor = v
    return out


# --- trace schema ------------------------------------------------------------

def validate_trace_obj(profile: dict, samples: list[dict]) -> None:
    """Check assembled records against the trace schema before writing.

    Mirrors the consumer's reader-side validation so a bad export fails
    here, in the producer, with a clear message.
    """
    n = profile["num_exits"]
    k = profile["num_classes"]
    if n < 1:
        raise ValueError(f"schema: num_exits must be >= 1, got {n}")
    if k < 1:
        raise ValueError(f"schema: num_classes must be >= 1, got {k}")
    if not profile["model"] or not profile["dataset"]:
        raise ValueError("schema: empty model or dataset name")
    for name in ("cum_macs", "cum_time_ms", "cum_energy_mj"):
        values = profile[name]
        if len(values) != n:
            raise ValueError(f"schema: {name} has {len(values)} entries, "
                             f"expected {n}")
        _check_cumulative(f"schema: {name}", values)
    seen: set[str] = set()
    for s in samples:
        sid = s["id"]
        if not sid or sid in seen:
            raise ValueError(f"schema: empty or duplicate sample id {sid!r}")
        seen.add(sid)
        if len(s["conf"]) != n or len(s["pred"]) != n:
            raise ValueError(f"schema: sample {sid} has {len(s['conf'])} "
                             f"confidences and {len(s['pred'])} predictions, "
                             f"expected {n} each")
        if any(not 0.0 <= c <= 1.0 for c in s["conf"]):
            raise ValueError(f"schema: sample {sid} confidence outside [0, 1]")
        if any(not 0 <= p < k for p in s["pred"]):
            raise ValueError(f"schema: sample {sid} prediction outside [0, {k})")
        if "label" in s and not 0 <= s["label"] < k:
            raise ValueError(f"schema: sample {sid} label outside [0, {k})")


@dataclass
class ExportResult:
    """Where the trace went and what it contains."""

    out_path: Path
    num_samples: int
    num_exits: int
    cum_macs: list[int] = field(default_factory=list)
    cum_time_ms: list[float] = field(default_factory=list)
    images_dir: Path | None = None


def export(spec: ExportSpec, out_path: str | Path) -> ExportResult:
    """Run the model over the dataset and write the trace to ``out_path``.

    Deterministic per spec: weights come from ``torch.manual_seed`` and
    the dataset from a seeded generator, so two exports of the same spec
    produce identical sample records.  Measured timing varies run to run
    unless the spec pins ``time_ms``.
    """
    out_path = Path(out_path)
    images, labels = make_dataset(spec.dataset, spec.num_samples,
                                  spec.num_classes, spec.channels,
                                  spec.image_size, spec.seed)
    model = build_model(spec.model, spec.channels, spec.image_size,
                        spec.num_classes, list(spec.attachments), spec.seed,
                        spec.head_dims)
    n = len(spec.attachments)

    one = torch.zeros(1, spec.channels, spec.image_size, spec.image_size)
    cum_macs = cumulative_exit_macs(model, one)
    _check_cumulative("cum_macs", cum_macs)
    if spec.time_ms is not None:
        cum_time = list(spec.time_ms)
    else:
        cum_time = _strictify(_measure_time_ms(model, one, spec.timing_repeats))

    with torch.no_grad():
        logits = model(torch.from_numpy(images))
    probs = [torch.softmax(l, dim=1) for l in logits]
    conf = np.stack([p.max(dim=1).values.numpy() for p in probs], axis=1)
    pred = np.stack([p.argmax(dim=1).numpy() for p in probs], axis=1)
    conf = np.clip(conf.astype(np.float64), 0.0, 1.0)

    images_dir = None
    if spec.export_images is not None:
        images_dir = out_path.parent / spec.export_images
        images_dir.mkdir(parents=True, exist_ok=True)

    profile = {
        "type": "profile",
        "model": spec.model,
        "dataset": spec.dataset,
        "num_exits": n,
        "num_classes": spec.num_classes,
        "cum_macs": [float(m) for m in cum_macs],
        "cum_time_ms": [float(t) for t in cum_time],
        "cum_energy_mj": [float(e) for e in spec.energy_mj],
    }
    samples = []
    for i in range(spec.num_samples):
        sid = f"s{i:06d}"
        record = {
            "type": "sample",
            "id": sid,
            "label": int(labels[i]),
            "conf": [float(c) for c in conf[i]],
            "pred": [int(p) for p in pred[i]],
        }
        if images_dir is not None:
            ext = "pgm" if spec.channels == 1 else "ppm"
            name = f"{sid}.{ext}"
            write_image(images[i], images_dir / name)
            record["image"] = f"{spec.export_images}/{name}"
        samples.append(record)

    validate_trace_obj(profile, samples)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(profile) + "\n")
            for s in samples:
                fh.write(json.dumps(s) + "\n")
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ExportResult(out_path=out_path, num_samples=spec.num_samples,
                        num_exits=n, cum_macs=[int(m) for m in cum_macs],
                        cum_time_ms=list(cum_time), images_dir=images_dir)
