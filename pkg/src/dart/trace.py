"""Inference traces: the JSONL interchange format, a synthetic generator, and image decoding.

A trace file is one profile line followed by one line per sample.  Every
record a policy needs is stored up front (per-exit confidences, predictions,
cumulative costs), so policies can be evaluated offline without re-running
the model.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .difficulty import ImagePlane


class TraceFormatError(ValueError):
    """Malformed trace input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _as_cost_tuple(name: str, values: Iterable[float], num_exits: int) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if len(out) != num_exits:
        raise ValueError(f"{name} has {len(out)} entries, expected {num_exits}")
    if any(not math.isfinite(v) for v in out):
        raise ValueError(f"{name} contains a non-finite value")
    if out[0] <= 0.0:
        raise ValueError(f"{name} must be positive, got {out[0]} first")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {out}")
    return out


@dataclass(frozen=True)
class ExitProfile:
    """Static description of an instrumented model: exits and their cumulative costs."""

    model: str
    dataset: str
    num_exits: int
    num_classes: int
    cum_macs: tuple[float, ...]
    cum_time_ms: tuple[float, ...]
    cum_energy_mj: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.num_exits < 1:
            raise ValueError(f"num_exits must be >= 1, got {self.num_exits}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        for name in ("cum_macs", "cum_time_ms", "cum_energy_mj"):
            object.__setattr__(self, name,
                               _as_cost_tuple(name, getattr(self, name), self.num_exits))

    @property
    def normalized_macs(self) -> tuple[float, ...]:
        """Cumulative MACs divided by the full-network total; last entry is 1."""
        total = self.cum_macs[-1]
        return tuple(m / total for m in self.cum_macs)


@dataclass(frozen=True)
class SampleRecord:
    """One sample's per-exit observations."""

    sample_id: str
    confidences: tuple[float, ...]
    predictions: tuple[int, ...]
    label: int | None = None
    difficulty: float | None = None
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise ValueError("empty sample id")
        conf = tuple(float(c) for c in self.confidences)
        pred = tuple(int(p) for p in self.predictions)
        if len(conf) != len(pred):
            raise ValueError(f"conf has {len(conf)} entries but pred has {len(pred)}")
        if any(not 0.0 <= c <= 1.0 for c in conf):
            raise ValueError(f"confidence outside [0, 1] in {conf}")
        if any(p < 0 for p in pred):
            raise ValueError("negative prediction")
        if self.label is not None and self.label < 0:
            raise ValueError(f"negative label {self.label}")
        if self.difficulty is not None and not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty {self.difficulty} outside [0, 1]")
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "predictions", pred)


@dataclass
class TraceSet:
    """A profile plus its samples, validated for mutual consistency.

    Treated as immutable after construction; the array views below are cached.
    """

    profile: ExitProfile
    samples: list[SampleRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        n, k = self.profile.num_exits, self.profile.num_classes
        seen: set[str] = set()
        for s in self.samples:
            if len(s.confidences) != n:
                raise ValueError(f"sample {s.sample_id}: {len(s.confidences)} confidences, "
                                 f"expected {n}")
            if any(p >= k for p in s.predictions):
                raise ValueError(f"sample {s.sample_id}: prediction outside [0, {k})")
            if s.label is not None and s.label >= k:
                raise ValueError(f"sample {s.sample_id}: label {s.label} outside [0, {k})")
            if s.sample_id in seen:
                raise ValueError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def conf_matrix(self) -> np.ndarray:
        """(num_samples, num_exits) confidence matrix."""
        return np.array([s.confidences for s in self.samples], dtype=np.float64)

    @cached_property
    def pred_matrix(self) -> np.ndarray:
        """(num_samples, num_exits) prediction matrix."""
        return np.array([s.predictions for s in self.samples], dtype=np.int64)

    @cached_property
    def labels(self) -> np.ndarray:
        """(num_samples,) label vector; raises if any sample is unlabeled."""
        missing = [s.sample_id for s in self.samples if s.label is None]
        if missing:
            raise ValueError(f"{len(missing)} samples have no label (first: {missing[0]})")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @cached_property
    def correct_matrix(self) -> np.ndarray:
        """(num_samples, num_exits) bool matrix: prediction at exit == label."""
        return self.pred_matrix == self.labels[:, np.newaxis]

    @cached_property
    def difficulties(self) -> np.ndarray:
        """(num_samples,) stored difficulty vector; raises if any sample lacks one."""
        missing = [s.sample_id for s in self.samples if s.difficulty is None]
        if missing:
            raise ValueError(f"{len(missing)} samples have no stored difficulty "
                             f"(first: {missing[0]})")
        return np.array([s.difficulty for s in self.samples], dtype=np.float64)


# --- JSONL serialisation ---------------------------------------------------

def _profile_to_obj(p: ExitProfile) -> dict:
    return {
        "type": "profile",
        "model": p.model,
        "dataset": p.dataset,
        "num_exits": p.num_exits,
        "num_classes": p.num_classes,
        "cum_macs": list(p.cum_macs),
        "cum_time_ms": list(p.cum_time_ms),
        "cum_energy_mj": list(p.cum_energy_mj),
    }


def _sample_to_obj(s: SampleRecord) -> dict:
    obj: dict = {"type": "sample", "id": s.sample_id}
    if s.label is not None:
        obj["label"] = s.label
    obj["conf"] = list(s.confidences)
    obj["pred"] = list(s.predictions)
    if s.difficulty is not None:
        obj["difficulty"] = s.difficulty
    if s.image_ref is not None:
        obj["image"] = s.image_ref
    return obj


def write_trace(traces: TraceSet, dest: str | Path | IO[str]) -> None:
    """Serialise a TraceSet as UTF-8 JSON lines: profile first, then samples."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_trace(traces, fh)
        return
    dest.write(json.dumps(_profile_to_obj(traces.profile)) + "\n")
    for s in traces.samples:
        dest.write(json.dumps(_sample_to_obj(s)) + "\n")


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise TraceFormatError(f"missing required key {key!r}", line)
    return obj[key]


def read_trace(source: str | Path | IO[str]) -> TraceSet:
    """Parse a JSONL trace; raises TraceFormatError naming the offending line."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_trace(fh)

    profile: ExitProfile | None = None
    samples: list[SampleRecord] = []
    seen_ids: set[str] = set()
    for line_no, raw in enumerate(source, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"invalid JSON: {exc.msg}", line_no) from exc
        if not isinstance(obj, dict):
            raise TraceFormatError("record is not a JSON object", line_no)
        kind = obj.get("type")
        if profile is None:
            if kind != "profile":
                raise TraceFormatError("first record must have type 'profile'", line_no)
            try:
                profile = ExitProfile(
                    model=str(_require(obj, "model", line_no)),
                    dataset=str(_require(obj, "dataset", line_no)),
                    num_exits=int(_require(obj, "num_exits", line_no)),
                    num_classes=int(_require(obj, "num_classes", line_no)),
                    cum_macs=_require(obj, "cum_macs", line_no),
                    cum_time_ms=_require(obj, "cum_time_ms", line_no),
                    cum_energy_mj=_require(obj, "cum_energy_mj", line_no),
                )
            except (TypeError, ValueError) as exc:
                if isinstance(exc, TraceFormatError):
                    raise
                raise TraceFormatError(f"bad profile: {exc}", line_no) from exc
            continue
        if kind != "sample":
            raise TraceFormatError(f"unexpected record type {kind!r}", line_no)
        try:
            record = SampleRecord(
                sample_id=str(_require(obj, "id", line_no)),
                confidences=_require(obj, "conf", line_no),
                predictions=_require(obj, "pred", line_no),
                label=None if obj.get("label") is None else int(obj["label"]),
                difficulty=None if obj.get("difficulty") is None else float(obj["difficulty"]),
                image_ref=None if obj.get("image") is None else str(obj["image"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TraceFormatError):
                raise
            raise TraceFormatError(f"bad sample: {exc}", line_no) from exc
        if len(record.confidences) != profile.num_exits:
            raise TraceFormatError(
                f"sample has {len(record.confidences)} confidences, "
                f"expected {profile.num_exits}", line_no)
        if any(p >= profile.num_classes for p in record.predictions):
            raise TraceFormatError(
                f"prediction outside [0, {profile.num_classes})", line_no)
        if record.label is not None and record.label >= profile.num_classes:
            raise TraceFormatError(
                f"label {record.label} outside [0, {profile.num_classes})", line_no)
        if record.sample_id in seen_ids:
            raise TraceFormatError(f"duplicate sample id {record.sample_id!r}", line_no)
        seen_ids.add(record.sample_id)
        samples.append(record)
    if profile is None:
        raise TraceFormatError("empty input: no profile record", 1)
    return TraceSet(profile=profile, samples=samples)


# --- Synthetic traces ------------------------------------------------------

def synth_trace(num_exits: int, num_samples: int, num_classes: int, seed: int,
                class_bias: Mapping[int, float] | None = None, *,
                gain: float = 4.0, difficulty_weight: float = 2.0,
                noise_sigma: float = 0.3,
                total_macs: float = 1.0e9, total_time_ms: float = 10.0,
                total_energy_mj: float = 100.0,
                model: str = "synthetic", dataset: str = "synthetic") -> TraceSet:
    """Generate a calibrated trace: P(correct at exit i | conf) == conf by construction.

    Each sample draws a uniform difficulty (optionally shifted per class via
    class_bias), and confidence at exit i follows
    sigmoid(gain * i/N - difficulty_weight * alpha + noise).  Deeper exits are
    therefore more confident, harder samples less so.
    """
    if num_exits < 1:
        raise ValueError(f"num_exits must be >= 1, got {num_exits}")
    if num_samples < 0:
        raise ValueError(f"num_samples must be >= 0, got {num_samples}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    offsets = np.zeros(num_classes)
    for cls, off in (class_bias or {}).items():
        if not 0 <= cls < num_classes:
            raise ValueError(f"class_bias key {cls} outside [0, {num_classes})")
        offsets[cls] = off

    n, m, k = num_exits, num_samples, num_classes
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=m)
    alpha = np.clip(rng.random(m) + offsets[labels], 0.0, 1.0)
    depth = np.arange(1, n + 1) / n
    logits = (gain * depth[np.newaxis, :]
              - difficulty_weight * alpha[:, np.newaxis]
              + rng.normal(0.0, noise_sigma, size=(m, n)))
    conf = np.clip(1.0 / (1.0 + np.exp(-logits)), 0.0, 1.0)
    correct = rng.random((m, n)) < conf
    wrong = (labels[:, np.newaxis] + rng.integers(1, k, size=(m, n))) % k
    pred = np.where(correct, labels[:, np.newaxis], wrong)

    profile = ExitProfile(
        model=model, dataset=dataset, num_exits=n, num_classes=k,
        cum_macs=tuple(depth * total_macs),
        cum_time_ms=tuple(depth * total_time_ms),
        cum_energy_mj=tuple(depth * total_energy_mj),
    )
    samples = [
        SampleRecord(
            sample_id=f"s{i:06d}",
            label=int(labels[i]),
            confidences=tuple(conf[i]),
            predictions=tuple(int(p) for p in pred[i]),
            difficulty=float(alpha[i]),
        )
        for i in range(m)
    ]
    return TraceSet(profile=profile, samples=samples)


# --- Image decoding --------------------------------------------------------

_DIMG_MAGIC = b"DIMG"


def _pnm_header(data: bytes, path: str, count: int) -> tuple[list[int], int]:
    """Parse `count` integer tokens after the magic, honouring '#' comments.

    Returns the tokens and the offset of the first pixel byte.
    """
    pos = 2  # past the 2-byte magic
    tokens: list[int] = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise ValueError(f"{path}: bad header token {data[start:pos]!r}") from None
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ValueError(f"{path}: truncated header")
    return tokens, pos + 1


def _load_pnm(data: bytes, path: str, channels: int) -> ImagePlane:
    (width, height, maxval), offset = _pnm_header(data, path, 3)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) < expected:
        raise ValueError(f"{path}: truncated pixel data "
                         f"({len(raster)} of {expected} bytes)")
    pixels = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return ImagePlane(pixels.reshape(height, width, channels))


def _load_dimg(data: bytes, path: str) -> ImagePlane:
    header = data[4:16]
    if len(header) < 12:
        raise ValueError(f"{path}: truncated header")
    width, height, channels = np.frombuffer(header, dtype="<u4")
    if channels not in (1, 3):
        raise ValueError(f"{path}: unsupported channel count {channels}")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    expected = int(width) * int(height) * int(channels)
    raster = data[16 : 16 + 4 * expected]
    if len(raster) < 4 * expected:
        raise ValueError(f"{path}: truncated pixel data "
                         f"({len(raster)} of {4 * expected} bytes)")
    pixels = np.frombuffer(raster, dtype="<f4").astype(np.float64)
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError(f"{path}: intensity outside [0, 1]")
    return ImagePlane(pixels.reshape(int(height), int(width), int(channels)))


def load_image(path: str | Path) -> ImagePlane:
    """Decode a PGM (P5), PPM (P6), or DIMG raw-tensor file into an ImagePlane."""
    data = Path(path).read_bytes()
    name = str(path)
    if data[:4] == _DIMG_MAGIC:
        return _load_dimg(data, name)
    if data[:2] == b"P5":
        return _load_pnm(data, name, channels=1)
    if data[:2] == b"P6":
        return _load_pnm(data, name, channels=3)
    raise ValueError(f"{name}: unknown image magic {data[:4]!r}")
