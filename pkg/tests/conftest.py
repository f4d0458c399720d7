from __future__ import annotations

import math

import numpy as np
import pytest

from dart.trace import ExitProfile, SampleRecord, TraceSet


def brute_force_correlate(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Reference 3x3 cross-correlation with clamp-to-edge indexing, pixel by pixel."""
    h, w = plane.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += kernel[dy + 1, dx + 1] * plane[yy, xx]
            out[y, x] = acc
    return out


def brute_force_objective(thresholds, traces: TraceSet, beta: float = 0.3) -> float:
    """Reference objective: walk each sample through the exit rule and average."""
    profile = traces.profile
    n = profile.num_exits
    chat = [m / profile.cum_macs[-1] for m in profile.cum_macs]
    terms = []
    for s in traces.samples:
        chosen = n - 1
        for i in range(n - 1):
            if s.confidences[i] > thresholds[i]:
                chosen = i
                break
        correct = 1.0 if s.predictions[chosen] == s.label else 0.0
        terms.append(correct - beta * chat[chosen])
    return math.fsum(terms) / len(terms)


def make_trace(conf_rows, pred_rows, labels, *, num_classes=None,
               cum_macs=(1.0, 2.0, 3.0), cum_time_ms=None, cum_energy_mj=None,
               difficulties=None) -> TraceSet:
    """Hand-rolled trace with explicit per-sample columns."""
    n = len(conf_rows[0])
    k = num_classes or (max(max(labels), max(max(p) for p in pred_rows)) + 1)
    macs = tuple(cum_macs[:n]) if len(cum_macs) >= n else tuple(float(i + 1) for i in range(n))
    time_ms = tuple(cum_time_ms[:n]) if cum_time_ms else tuple(m / 10.0 for m in macs)
    energy = tuple(cum_energy_mj[:n]) if cum_energy_mj else tuple(m * 2.0 for m in macs)
    profile = ExitProfile(model="unit", dataset="unit", num_exits=n, num_classes=k,
                          cum_macs=macs, cum_time_ms=time_ms, cum_energy_mj=energy)
    samples = [
        SampleRecord(sample_id=f"u{i}", label=labels[i],
                     confidences=tuple(conf_rows[i]), predictions=tuple(pred_rows[i]),
                     difficulty=None if difficulties is None else difficulties[i])
        for i in range(len(conf_rows))
    ]
    return TraceSet(profile=profile, samples=samples)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
