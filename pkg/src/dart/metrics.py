"""Efficiency metrics and run reporting.

Speedup and power efficiency are ratios against a static (final-exit-only)
baseline.  The combined score folds accuracy, both ratios, and dataset
difficulty into one number:

    DAES = accuracy * speedup * power_efficiency / (1 + alpha)

with accuracy as a fraction and alpha the mean difficulty in [0, 1].
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:  # avoids a circular import; aggregate only reads attributes
    from .engine import ExitOutcome
    from .trace import ExitProfile


def speedup(baseline_time_ms: float, time_ms: float) -> float:
    """How many times faster than the baseline."""
    if baseline_time_ms <= 0.0 or time_ms <= 0.0:
        raise ValueError("times must be > 0")
    return baseline_time_ms / time_ms


def power(energy_mj: float, time_ms: float) -> float:
    """Average power in watts (mJ over ms)."""
    if time_ms <= 0.0:
        raise ValueError("time must be > 0")
    if energy_mj < 0.0:
        raise ValueError("energy must be >= 0")
    return energy_mj / time_ms


def power_efficiency(baseline_energy_mj: float, energy_mj: float) -> float:
    """Energy ratio against the baseline; above 1 means less energy per sample."""
    if baseline_energy_mj <= 0.0 or energy_mj <= 0.0:
        raise ValueError("energies must be > 0")
    return baseline_energy_mj / energy_mj


def daes(accuracy: float, speedup_ratio: float, power_eff: float,
         alpha: float) -> float:
    """Difficulty-adjusted efficiency score; accuracy is a fraction, not percent."""
    if not 0.0 < accuracy <= 1.0:
        raise ValueError(f"accuracy {accuracy} outside (0, 1]")
    if speedup_ratio <= 0.0 or power_eff <= 0.0:
        raise ValueError("speedup and power efficiency must be > 0")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return accuracy * speedup_ratio * power_eff / (1.0 + alpha)


@dataclass(frozen=True)
class RunReport:
    """Aggregates of one simulated run."""

    num_samples: int
    accuracy: float | None           # None when no sample was labeled
    mean_time_ms: float
    mean_energy_mj: float
    mean_macs: float
    mean_power_w: float              # mean energy over mean time
    exit_histogram: tuple[float, ...]  # fraction leaving at each exit; sums to 1
    mean_difficulty: float | None
    overhead_ms: float = 0.0


def aggregate(outcomes: Sequence["ExitOutcome"], profile: "ExitProfile",
              overhead_ms: float = 0.0) -> RunReport:
    """Fold an outcome stream into a RunReport."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    n = profile.num_exits
    counts = [0] * n
    total_time = total_energy = total_macs = 0.0
    labeled = hits = 0
    diffs: list[float] = []
    for o in outcomes:
        if not 1 <= o.chosen_exit <= n:
            raise ValueError(f"outcome {o.sample_id}: exit {o.chosen_exit} "
                             f"outside [1, {n}]")
        counts[o.chosen_exit - 1] += 1
        total_time += o.time_ms
        total_energy += o.energy_mj
        total_macs += o.macs
        if o.correct is not None:
            labeled += 1
            hits += o.correct
        if o.difficulty is not None:
            diffs.append(o.difficulty)
    m = len(outcomes)
    mean_time = total_time / m
    mean_energy = total_energy / m
    return RunReport(
        num_samples=m,
        accuracy=hits / labeled if labeled else None,
        mean_time_ms=mean_time,
        mean_energy_mj=mean_energy,
        mean_macs=total_macs / m,
        mean_power_w=mean_energy / mean_time,
        exit_histogram=tuple(c / m for c in counts),
        mean_difficulty=sum(diffs) / len(diffs) if diffs else None,
        overhead_ms=overhead_ms,
    )


@dataclass(frozen=True)
class Comparison:
    """A candidate run scored against a baseline run."""

    baseline: RunReport
    candidate: RunReport
    speedup: float
    power_efficiency: float
    daes_baseline: float | None
    daes_candidate: float | None
    alpha: float | None


def _maybe_daes(accuracy: float | None, sp: float, pe: float,
                alpha: float | None) -> float | None:
    if accuracy is None or accuracy <= 0.0 or alpha is None:
        return None
    return daes(accuracy, sp, pe, alpha)


def compare(baseline: RunReport, candidate: RunReport,
            alpha_override: float | None = None) -> Comparison:
    """Derive ratio metrics of candidate vs baseline.

    The difficulty used for both DAES values is the override when given, else
    each run's own mean difficulty.
    """
    sp = speedup(baseline.mean_time_ms, candidate.mean_time_ms)
    pe = power_efficiency(baseline.mean_energy_mj, candidate.mean_energy_mj)
    alpha_b = alpha_override if alpha_override is not None else baseline.mean_difficulty
    alpha_c = alpha_override if alpha_override is not None else candidate.mean_difficulty
    return Comparison(
        baseline=baseline, candidate=candidate, speedup=sp, power_efficiency=pe,
        daes_baseline=_maybe_daes(baseline.accuracy, 1.0, 1.0, alpha_b),
        daes_candidate=_maybe_daes(candidate.accuracy, sp, pe, alpha_c),
        alpha=alpha_c,
    )


# --- Rendering ---------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    """One renderable line of a results table."""

    model: str
    method: str
    report: RunReport
    speedup: float
    power_eff: float
    daes: float | None
    alpha: float | None


def rows_from_single(model: str, method: str, report: RunReport,
                     alpha_override: float | None = None) -> list[ReportRow]:
    """A lone run is reported as its own baseline (unit ratios)."""
    alpha = alpha_override if alpha_override is not None else report.mean_difficulty
    return [ReportRow(model=model, method=method, report=report, speedup=1.0,
                      power_eff=1.0, daes=_maybe_daes(report.accuracy, 1.0, 1.0, alpha),
                      alpha=alpha)]


def rows_from_comparison(model: str, baseline_method: str, candidate_method: str,
                         comp: Comparison,
                         alpha_override: float | None = None) -> list[ReportRow]:
    alpha_b = (alpha_override if alpha_override is not None
               else comp.baseline.mean_difficulty)
    return [
        ReportRow(model=model, method=baseline_method, report=comp.baseline,
                  speedup=1.0, power_eff=1.0, daes=comp.daes_baseline, alpha=alpha_b),
        ReportRow(model=model, method=candidate_method, report=comp.candidate,
                  speedup=comp.speedup, power_eff=comp.power_efficiency,
                  daes=comp.daes_candidate, alpha=comp.alpha),
    ]


def _fmt(value: float | None, places: int, scale: float = 1.0) -> str:
    return "-" if value is None else f"{value * scale:.{places}f}"


def render_table(rows: Sequence[ReportRow]) -> str:
    """Fixed-width table: 2 decimals for metrics, 3 for the combined score."""
    header = ["Model", "Method", "Acc(%)", "Time(ms)", "Energy(mJ)",
              "Power(W)", "Speedup", "PowerEff", "DAES", "Alpha"]
    body = []
    for r in rows:
        body.append([
            r.model, r.method,
            _fmt(r.report.accuracy, 2, scale=100.0),
            _fmt(r.report.mean_time_ms, 2),
            _fmt(r.report.mean_energy_mj, 2),
            _fmt(r.report.mean_power_w, 2),
            _fmt(r.speedup, 2),
            _fmt(r.power_eff, 2),
            _fmt(r.daes, 3),
            _fmt(r.alpha, 2),
        ])
    widths = [max(len(header[i]), *(len(row[i]) for row in body))
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    for r in rows:
        mix = " ".join(f"{i + 1}:{frac:.3f}"
                       for i, frac in enumerate(r.report.exit_histogram))
        lines.append(f"exit mix [{r.method}]: {mix}")
        if r.report.overhead_ms > 0.0:
            lines.append(f"difficulty overhead [{r.method}]: "
                         f"{r.report.overhead_ms:.2f} ms")
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[ReportRow]) -> str:
    """Machine-readable rows at full float precision; unknown cells stay empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "method", "accuracy", "time_ms", "energy_mj",
                     "power_w", "speedup", "power_eff", "daes", "mean_alpha"])
    for r in rows:
        writer.writerow([
            r.model, r.method,
            "" if r.report.accuracy is None else repr(r.report.accuracy),
            repr(r.report.mean_time_ms),
            repr(r.report.mean_energy_mj),
            repr(r.report.mean_power_w),
            repr(r.speedup),
            repr(r.power_eff),
            "" if r.daes is None else repr(r.daes),
            "" if r.alpha is None else repr(r.alpha),
        ])
    return buf.getvalue()


def report_to_dict(report: RunReport) -> dict:
    return {
        "num_samples": report.num_samples,
        "accuracy": report.accuracy,
        "mean_time_ms": report.mean_time_ms,
        "mean_energy_mj": report.mean_energy_mj,
        "mean_macs": report.mean_macs,
        "mean_power_w": report.mean_power_w,
        "exit_histogram": list(report.exit_histogram),
        "mean_difficulty": report.mean_difficulty,
        "overhead_ms": report.overhead_ms,
    }


def render_json(rows: Sequence[ReportRow]) -> str:
    payload = {"results": [
        {
            "model": r.model,
            "method": r.method,
            "speedup": r.speedup,
            "power_efficiency": r.power_eff,
            "daes": r.daes,
            "alpha": r.alpha,
            "report": report_to_dict(r.report),
        }
        for r in rows
    ]}
    return json.dumps(payload, indent=2) + "\n"


def render(rows: Sequence[ReportRow], fmt: str = "table") -> str:
    if fmt == "table":
        return render_table(rows)
    if fmt == "csv":
        return render_csv(rows)
    if fmt == "json":
        return render_json(rows)
    raise ValueError(f"unknown format {fmt!r}")
