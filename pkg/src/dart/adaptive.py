"""Online threshold adaptation.

Coefficients multiply the base thresholds and drift with observed accuracy:
a temporal rule nudges the global vector toward a performance target, a
class-aware rule specialises per-class vectors, and an optional UCB1 bandit
picks between strategies.  All statistics come from a sliding window over
recent outcomes, so the policy tracks drift instead of the full history.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

COEFF_MIN = 0.5
COEFF_MAX = 2.0

STRATEGIES = ("temporal", "class", "both", "frozen")


def clamp_coefficient(value: float) -> float:
    return min(max(value, COEFF_MIN), COEFF_MAX)


@dataclass
class CoefficientSet:
    """Threshold multipliers: one global vector plus per-class specialisations."""

    global_coeffs: list[float]
    per_class: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.global_coeffs = [float(c) for c in self.global_coeffs]
        self._check(self.global_coeffs, "global")
        self.per_class = {int(k): [float(c) for c in v] for k, v in self.per_class.items()}
        for cls, vec in self.per_class.items():
            if len(vec) != len(self.global_coeffs):
                raise ValueError(f"class {cls} vector has {len(vec)} entries, "
                                 f"expected {len(self.global_coeffs)}")
            self._check(vec, f"class {cls}")

    @staticmethod
    def _check(vec: Sequence[float], what: str) -> None:
        for c in vec:
            if not COEFF_MIN <= c <= COEFF_MAX:
                raise ValueError(f"{what} coefficient {c} outside "
                                 f"[{COEFF_MIN}, {COEFF_MAX}]")

    @classmethod
    def ones(cls, num_thresholds: int) -> "CoefficientSet":
        return cls(global_coeffs=[1.0] * num_thresholds)

    def for_class(self, label: int | None) -> list[float]:
        """Vector applied to a sample of the given class; global when unspecialised."""
        if label is not None and label in self.per_class:
            return self.per_class[label]
        return self.global_coeffs

    def ensure_class(self, label: int) -> list[float]:
        """Per-class vector, created from the current global vector on first touch."""
        if label not in self.per_class:
            self.per_class[label] = list(self.global_coeffs)
        return self.per_class[label]

    def copy(self) -> "CoefficientSet":
        return CoefficientSet(global_coeffs=list(self.global_coeffs),
                              per_class={k: list(v) for k, v in self.per_class.items()})


@dataclass(frozen=True)
class WindowEntry:
    """One remembered outcome: where it exited and how it went."""

    exit_index: int        # 1-based chosen exit
    class_label: int       # true label, or pseudo-label from the prediction
    correct: bool
    confidence: float
    cost: float            # normalised cumulative MACs at the chosen exit


@dataclass(frozen=True)
class WindowStats:
    count: int
    accuracy: float
    mean_confidence: float
    mean_cost: float


class SlidingWindow:
    """Fixed-capacity FIFO of recent outcomes."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque[WindowEntry] = deque(maxlen=capacity)

    def push(self, entry: WindowEntry) -> None:
        self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[WindowEntry]:
        return iter(self._entries)

    def stats(self, exit_index: int | None = None,
              class_label: int | None = None) -> WindowStats | None:
        """Aggregate over entries matching the filter; None when nothing matches."""
        selected = [e for e in self._entries
                    if (exit_index is None or e.exit_index == exit_index)
                    and (class_label is None or e.class_label == class_label)]
        if not selected:
            return None
        n = len(selected)
        return WindowStats(
            count=n,
            accuracy=sum(e.correct for e in selected) / n,
            mean_confidence=sum(e.confidence for e in selected) / n,
            mean_cost=sum(e.cost for e in selected) / n,
        )


def performance_signal(accuracy: float, target: float = 0.85) -> float:
    """Desired coefficient level: above 1 when accuracy lags the target."""
    if not 0.0 <= accuracy <= 1.0 or not 0.0 <= target <= 1.0:
        raise ValueError("accuracy and target must lie in [0, 1]")
    return 1.0 + (target - accuracy)


def temporal_update(coefficient: float, performance: float,
                    decay: float = 0.95) -> float:
    """Exponential blend toward the performance signal, clamped to the legal range."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay {decay} outside [0, 1]")
    return clamp_coefficient(decay * coefficient + (1.0 - decay) * performance)


def class_update(coefficients: Sequence[float], class_accuracy: float,
                 target: float = 0.85, rate: float = 0.05) -> list[float]:
    """Shift a class vector toward the target: lagging classes get higher thresholds."""
    if rate <= 0.0:
        raise ValueError(f"rate must be > 0, got {rate}")
    if not 0.0 <= class_accuracy <= 1.0 or not 0.0 <= target <= 1.0:
        raise ValueError("accuracies must lie in [0, 1]")
    delta = rate * (target - class_accuracy)
    return [clamp_coefficient(c + delta) for c in coefficients]


class BanditState:
    """UCB1 over a fixed set of arms, tracking running mean rewards."""

    def __init__(self, arms: Sequence[str] = STRATEGIES):
        if not arms:
            raise ValueError("no arms registered")
        self.arms = tuple(arms)
        self.counts = [0] * len(self.arms)
        self.means = [0.0] * len(self.arms)
        self.total = 0


def ucb_select(state: BanditState) -> int:
    """Arm to play next: untried arms first, then highest upper confidence bound.

    Ties resolve to the lowest index.
    """
    for i, n in enumerate(state.counts):
        if n == 0:
            return i
    best_i, best_u = 0, -math.inf
    for i, (n, mean) in enumerate(zip(state.counts, state.means)):
        u = mean + math.sqrt(2.0 * math.log(state.total) / n)
        if u > best_u:
            best_i, best_u = i, u
    return best_i


def bandit_reward(state: BanditState, arm: int, accuracy: float,
                  norm_cost: float, beta_opt: float = 0.3) -> float:
    """Record one play: reward is windowed accuracy minus the weighted cost."""
    if not 0 <= arm < len(state.arms):
        raise ValueError(f"unknown arm {arm}, have {len(state.arms)}")
    reward = accuracy - beta_opt * norm_cost
    state.counts[arm] += 1
    state.total += 1
    state.means[arm] += (reward - state.means[arm]) / state.counts[arm]
    return reward


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs for online adaptation."""

    strategy: str = "both"
    use_bandit: bool = False
    window_capacity: int = 1000
    cadence: int = 100
    decay: float = 0.95
    rate: float = 0.05
    target_accuracy: float = 0.85
    pseudo_label_threshold: float = 0.9
    beta_opt: float = 0.3

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, "
                             f"expected one of {STRATEGIES}")
        if self.cadence < 1:
            raise ValueError(f"cadence must be >= 1, got {self.cadence}")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay {self.decay} outside [0, 1]")
        if self.rate <= 0.0:
            raise ValueError(f"rate must be > 0, got {self.rate}")
        if not 0.0 <= self.target_accuracy <= 1.0:
            raise ValueError(f"target accuracy {self.target_accuracy} outside [0, 1]")
        if not 0.0 <= self.pseudo_label_threshold <= 1.0:
            raise ValueError(f"pseudo-label threshold outside [0, 1]")


@dataclass(frozen=True)
class AdaptationEvent:
    """One coefficient change, for the adaptation log."""

    inference_count: int
    strategy: str
    scope: str                 # "global" or "class"
    class_label: int | None
    old: tuple[float, ...]
    new: tuple[float, ...]


class AdaptationManager:
    """Drives coefficient updates from a stream of exit outcomes.

    Labeled outcomes always enter the window.  Unlabeled ones enter only when
    the chosen exit was confident enough to trust its prediction as a
    pseudo-label (counted as correct); the rest are ignored for statistics.
    Updates fire every `cadence` inferences and apply to later samples only.
    """

    def __init__(self, coefficients: CoefficientSet,
                 config: AdaptationConfig | None = None):
        self.config = config or AdaptationConfig()
        self.coefficients = coefficients
        self.window = SlidingWindow(self.config.window_capacity)
        self.events: list[AdaptationEvent] = []
        self.inferences = 0
        self.bandit = BanditState(STRATEGIES) if self.config.use_bandit else None
        if self.bandit is not None:
            self.strategy = STRATEGIES[ucb_select(self.bandit)]
        else:
            self.strategy = self.config.strategy

    def observe(self, exit_index: int, prediction: int, confidence: float,
                cost: float, label: int | None) -> None:
        """Feed one outcome; may trigger an adaptation event."""
        if label is not None:
            self.window.push(WindowEntry(exit_index, label,
                                         prediction == label, confidence, cost))
        elif confidence >= self.config.pseudo_label_threshold:
            self.window.push(WindowEntry(exit_index, prediction,
                                         True, confidence, cost))
        self.inferences += 1
        if self.inferences % self.config.cadence == 0:
            self._adapt()

    def _adapt(self) -> None:
        overall = self.window.stats()
        if overall is None:
            return
        cfg = self.config
        if self.bandit is not None:
            arm = STRATEGIES.index(self.strategy)
            bandit_reward(self.bandit, arm, overall.accuracy,
                          overall.mean_cost, cfg.beta_opt)
            self.strategy = STRATEGIES[ucb_select(self.bandit)]
        if self.strategy in ("temporal", "both"):
            signal = performance_signal(overall.accuracy, cfg.target_accuracy)
            old = tuple(self.coefficients.global_coeffs)
            new = tuple(temporal_update(c, signal, cfg.decay) for c in old)
            self.coefficients.global_coeffs[:] = new
            self.events.append(AdaptationEvent(self.inferences, self.strategy,
                                               "global", None, old, new))
        if self.strategy in ("class", "both"):
            for cls in sorted({e.class_label for e in self.window}):
                st = self.window.stats(class_label=cls)
                vec = self.coefficients.ensure_class(cls)
                old = tuple(vec)
                new = tuple(class_update(old, st.accuracy,
                                         cfg.target_accuracy, cfg.rate))
                self.coefficients.per_class[cls] = list(new)
                self.events.append(AdaptationEvent(self.inferences, self.strategy,
                                                   "class", cls, old, new))
