"""The exit decision engine and trace-driven simulator.

A policy is a base threshold vector, multiplicative coefficients, and a
difficulty weight.  For each sample the effective thresholds are

    tau'_i = clamp(c_i * tau_i + beta_diff * alpha, 0, 1)

and the sample leaves at the first exit whose confidence strictly exceeds its
effective threshold, else at the final exit.  The simulator replays recorded
traces through this rule, optionally adapting coefficients as it goes.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

from .adaptive import (AdaptationConfig, AdaptationEvent, AdaptationManager,
                       CoefficientSet)
from .difficulty import difficulty as score_difficulty
from .metrics import RunReport, aggregate
from .trace import ExitProfile, SampleRecord, TraceFormatError, TraceSet, load_image


@dataclass
class ExitPolicy:
    """Deployable policy: base thresholds, coefficients, and difficulty weight."""

    thresholds: tuple[float, ...]
    coefficients: CoefficientSet | None = None
    beta_diff: float = 0.3
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        vals = tuple(float(t) for t in self.thresholds)
        if any(not 0.0 <= t <= 1.0 for t in vals):
            raise ValueError(f"threshold outside [0, 1] in {vals}")
        self.thresholds = vals
        if self.coefficients is None:
            self.coefficients = CoefficientSet.ones(len(vals))
        if len(self.coefficients.global_coeffs) != len(vals):
            raise ValueError(
                f"{len(self.coefficients.global_coeffs)} coefficients for "
                f"{len(vals)} thresholds")
        if self.beta_diff < 0.0:
            raise ValueError(f"beta_diff must be >= 0, got {self.beta_diff}")

    @property
    def num_exits(self) -> int:
        return len(self.thresholds) + 1


def save_policy(policy: ExitPolicy, dest: str | Path | IO[str]) -> None:
    """Write a policy as a single JSON object."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            save_policy(policy, fh)
        return
    obj = {
        "thresholds": list(policy.thresholds),
        "beta_diff": policy.beta_diff,
        "coefficients": {
            "global": list(policy.coefficients.global_coeffs),
            "per_class": {str(k): list(v)
                          for k, v in sorted(policy.coefficients.per_class.items())},
        },
        "meta": policy.meta,
    }
    json.dump(obj, dest, indent=2)
    dest.write("\n")


def load_policy(source: str | Path | IO[str]) -> ExitPolicy:
    """Read a policy JSON object, validating ranges."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_policy(fh)
    try:
        obj = json.load(source)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid policy JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or "thresholds" not in obj:
        raise ValueError("policy JSON must be an object with a 'thresholds' key")
    coeffs_obj = obj.get("coefficients") or {}
    thresholds = tuple(float(t) for t in obj["thresholds"])
    coefficients = CoefficientSet(
        global_coeffs=[float(c) for c in
                       coeffs_obj.get("global", [1.0] * len(thresholds))],
        per_class={int(k): [float(c) for c in v]
                   for k, v in (coeffs_obj.get("per_class") or {}).items()},
    )
    return ExitPolicy(thresholds=thresholds, coefficients=coefficients,
                      beta_diff=float(obj.get("beta_diff", 0.3)),
                      meta=obj.get("meta") or {})


def effective_thresholds(policy: ExitPolicy, alpha: float,
                         class_hint: int | None = None) -> tuple[float, ...]:
    """Per-sample thresholds after coefficient scaling and difficulty shift."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    coeffs = policy.coefficients.for_class(class_hint)
    return tuple(min(max(c * t + policy.beta_diff * alpha, 0.0), 1.0)
                 for c, t in zip(coeffs, policy.thresholds))


@dataclass(frozen=True)
class ExitOutcome:
    """Where one sample left the network and what that cost."""

    sample_id: str
    chosen_exit: int                       # 1-based
    prediction: int
    correct: bool | None
    effective_thresholds: tuple[float, ...]
    time_ms: float
    energy_mj: float
    macs: float
    difficulty: float | None = None


def decide_exit(record: SampleRecord, effective: Sequence[float],
                profile: ExitProfile, alpha: float | None = None) -> ExitOutcome:
    """Apply the strict-inequality exit rule to one sample's recorded confidences."""
    n = profile.num_exits
    if len(effective) != n - 1:
        raise ValueError(f"{len(effective)} thresholds for {n} exits, "
                         f"expected {n - 1}")
    chosen = n - 1
    for i in range(n - 1):
        if record.confidences[i] > effective[i]:
            chosen = i
            break
    prediction = record.predictions[chosen]
    return ExitOutcome(
        sample_id=record.sample_id,
        chosen_exit=chosen + 1,
        prediction=prediction,
        correct=None if record.label is None else prediction == record.label,
        effective_thresholds=tuple(effective),
        time_ms=profile.cum_time_ms[chosen],
        energy_mj=profile.cum_energy_mj[chosen],
        macs=profile.cum_macs[chosen],
        difficulty=alpha,
    )


@dataclass
class SimulationResult:
    outcomes: list[ExitOutcome]
    report: RunReport
    adaptation_events: list[AdaptationEvent]
    coefficients: CoefficientSet


def _resolve_difficulty(sample: SampleRecord, source: str | float,
                        base_dir: Path) -> tuple[float | None, float]:
    """(alpha, measured milliseconds).  Only image scoring costs wall time."""
    if isinstance(source, (int, float)):
        alpha = float(source)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"constant difficulty {alpha} outside [0, 1]")
        return alpha, 0.0
    if source == "stored":
        if sample.difficulty is None:
            raise ValueError(f"sample {sample.sample_id} has no stored difficulty")
        return sample.difficulty, 0.0
    if source == "image":
        if sample.image_ref is None:
            raise ValueError(f"sample {sample.sample_id} has no image reference")
        return _score_image(sample, base_dir)
    if source == "auto":
        if sample.difficulty is not None:
            return sample.difficulty, 0.0
        if sample.image_ref is not None:
            return _score_image(sample, base_dir)
        return None, 0.0
    raise ValueError(f"unknown difficulty source {source!r}")


def _score_image(sample: SampleRecord, base_dir: Path) -> tuple[float, float]:
    path = Path(sample.image_ref)
    if not path.is_absolute():
        path = base_dir / path
    start = time.perf_counter()
    image = load_image(path)
    score = score_difficulty(image)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    return score.fused, elapsed_ms


def simulate(traces: TraceSet, policy: ExitPolicy, *,
             adaptation: AdaptationConfig | None = None,
             difficulty_source: str | float = "auto",
             base_dir: str | Path | None = None) -> SimulationResult:
    """Replay a trace through the policy, in order, one decision per sample.

    With an adaptation config the coefficients evolve between samples (the
    policy object itself is never mutated).  Difficulty per sample comes from
    the stored field, the referenced image, or a supplied constant; missing
    difficulty is an error whenever beta_diff > 0 since the thresholds would
    be undefined.  Wall time spent scoring images accumulates into the
    report's overhead and never into per-sample charged costs.
    """
    profile = traces.profile
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    working = ExitPolicy(thresholds=policy.thresholds,
                         coefficients=policy.coefficients.copy(),
                         beta_diff=policy.beta_diff, meta=dict(policy.meta))
    manager = (AdaptationManager(working.coefficients, adaptation)
               if adaptation is not None else None)

    outcomes: list[ExitOutcome] = []
    overhead_ms = 0.0
    for sample in traces.samples:
        alpha, spent = _resolve_difficulty(sample, difficulty_source, base)
        overhead_ms += spent
        if alpha is None and working.beta_diff > 0.0:
            raise ValueError(
                f"sample {sample.sample_id} has no difficulty available and "
                f"beta_diff > 0; supply one or use beta_diff = 0")
        hint = sample.predictions[0] if profile.num_exits > 0 else None
        effective = effective_thresholds(working, alpha if alpha is not None else 0.0,
                                         class_hint=hint)
        outcome = decide_exit(sample, effective, profile, alpha)
        outcomes.append(outcome)
        if manager is not None:
            chosen = outcome.chosen_exit - 1
            manager.observe(
                exit_index=outcome.chosen_exit,
                prediction=outcome.prediction,
                confidence=sample.confidences[chosen],
                cost=profile.normalized_macs[chosen],
                label=sample.label,
            )
    report = aggregate(outcomes, profile, overhead_ms=overhead_ms)
    return SimulationResult(outcomes=outcomes, report=report,
                            adaptation_events=manager.events if manager else [],
                            coefficients=working.coefficients)


# --- Outcome stream serialisation -------------------------------------------

def _outcome_to_obj(o: ExitOutcome) -> dict:
    obj: dict = {
        "id": o.sample_id,
        "exit": o.chosen_exit,
        "pred": o.prediction,
    }
    if o.correct is not None:
        obj["correct"] = o.correct
    obj["eff_thresholds"] = list(o.effective_thresholds)
    obj["time_ms"] = o.time_ms
    obj["energy_mj"] = o.energy_mj
    obj["macs"] = o.macs
    if o.difficulty is not None:
        obj["difficulty"] = o.difficulty
    return obj


def write_outcomes(outcomes: Sequence[ExitOutcome], dest: str | Path | IO[str]) -> None:
    """One JSON object per line, in replay order."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_outcomes(outcomes, fh)
        return
    for o in outcomes:
        dest.write(json.dumps(_outcome_to_obj(o)) + "\n")


def read_outcomes(source: str | Path | IO[str]) -> list[ExitOutcome]:
    """Parse an outcome stream; raises TraceFormatError naming the bad line."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_outcomes(fh)
    out: list[ExitOutcome] = []
    for line_no, raw in enumerate(source, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"invalid JSON: {exc.msg}", line_no) from exc
        try:
            out.append(ExitOutcome(
                sample_id=str(obj["id"]),
                chosen_exit=int(obj["exit"]),
                prediction=int(obj["pred"]),
                correct=obj.get("correct"),
                effective_thresholds=tuple(float(t)
                                           for t in obj.get("eff_thresholds", ())),
                time_ms=float(obj["time_ms"]),
                energy_mj=float(obj["energy_mj"]),
                macs=float(obj["macs"]),
                difficulty=(None if obj.get("difficulty") is None
                            else float(obj["difficulty"])),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"bad outcome record: {exc}", line_no) from exc
    return out


def write_adaptation_log(events: Sequence[AdaptationEvent],
                         dest: str | Path | IO[str]) -> None:
    """One JSON object per adaptation event."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_adaptation_log(events, fh)
        return
    for e in events:
        obj: dict = {
            "inference": e.inference_count,
            "strategy": e.strategy,
            "scope": e.scope,
        }
        if e.class_label is not None:
            obj["class"] = e.class_label
        obj["old"] = list(e.old)
        obj["new"] = list(e.new)
        dest.write(json.dumps(obj) + "\n")
