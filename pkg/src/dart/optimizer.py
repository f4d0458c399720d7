"""Offline threshold optimisation over recorded traces.

Two routes to a threshold vector: exhaustive grid search over per-exit
candidate sets, and a trace-backed MDP solved by value iteration.  Both score
policies with the same objective

    J(tau) = sum_i pi_i * (A_i - beta * C_i)

where pi_i is the fraction of samples leaving at exit i, A_i their accuracy,
and C_i the exit's cumulative MACs normalised by the full network.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .trace import TraceSet

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = tuple(q / 10.0 for q in range(1, 10))


@dataclass(frozen=True)
class ObjectiveConfig:
    """Accuracy/cost trade-off knob for the offline objective."""

    beta_opt: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta_opt <= 1.0:
            raise ValueError(f"beta_opt {self.beta_opt} outside [0, 1]")


@dataclass(frozen=True)
class ThresholdVector:
    """Confidence thresholds for exits 1..N-1; 1.0 disables an exit."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"threshold outside [0, 1] in {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]


def _threshold_array(thresholds: Sequence[float] | ThresholdVector,
                     num_exits: int) -> np.ndarray:
    vals = tuple(thresholds)
    if len(vals) != num_exits - 1:
        raise ValueError(f"{len(vals)} thresholds for {num_exits} exits, "
                         f"expected {num_exits - 1}")
    arr = np.asarray(vals, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"threshold outside [0, 1] in {vals}")
    return arr


@dataclass(frozen=True)
class _Packed:
    """Trace columns needed by the objective, extracted once."""

    conf: np.ndarray      # (M, N) float
    correct: np.ndarray   # (M, N) bool
    chat: np.ndarray      # (N,) normalised cumulative MACs


def _pack(traces: TraceSet) -> _Packed:
    if not traces.samples:
        raise ValueError("empty trace set")
    return _Packed(conf=traces.conf_matrix, correct=traces.correct_matrix,
                   chat=np.asarray(traces.profile.normalized_macs))


def _exit_indices(conf: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """0-based index of the first exit whose confidence strictly beats its threshold."""
    m, n = conf.shape
    gates = np.ones((m, n), dtype=bool)
    if n > 1:
        gates[:, : n - 1] = conf[:, : n - 1] > tau[np.newaxis, :]
    return np.argmax(gates, axis=1)


def _objective_packed(packed: _Packed, tau: np.ndarray, beta: float) -> float:
    idx = _exit_indices(packed.conf, tau)
    m, n = packed.conf.shape
    counts = np.bincount(idx, minlength=n)
    hit = packed.correct[np.arange(m), idx]
    correct_counts = np.bincount(idx[hit], minlength=n)
    j = 0.0
    for i in range(n):
        if counts[i] == 0:
            continue  # empty exit contributes nothing (pi_i = 0)
        acc = correct_counts[i] / counts[i]
        j += (counts[i] / m) * (acc - beta * packed.chat[i])
    return j


def evaluate_objective(thresholds: Sequence[float] | ThresholdVector,
                       traces: TraceSet,
                       config: ObjectiveConfig | None = None) -> float:
    """Score one threshold vector against a recorded trace."""
    cfg = config or ObjectiveConfig()
    tau = _threshold_array(thresholds, traces.profile.num_exits)
    return _objective_packed(_pack(traces), tau, cfg.beta_opt)


def quantile_candidates(traces: TraceSet,
                        quantiles: Iterable[float] | None = None) -> list[list[float]]:
    """Per-exit candidate thresholds: confidence quantiles at each early exit.

    Uses linear order-statistic interpolation.  Candidates come back sorted
    ascending with exact duplicates removed, one list per exit 1..N-1.
    """
    qs = tuple(quantiles) if quantiles is not None else DEFAULT_QUANTILES
    if any(not 0.0 < q < 1.0 for q in qs):
        raise ValueError(f"quantile outside (0, 1) in {qs}")
    if not traces.samples:
        raise ValueError("empty trace set")
    conf = traces.conf_matrix
    out: list[list[float]] = []
    for i in range(traces.profile.num_exits - 1):
        vals = np.quantile(conf[:, i], qs)
        out.append(sorted({float(v) for v in vals}))
    return out


def _grid_chunk_best(packed: _Packed, taus: list[tuple[float, ...]],
                     beta: float) -> tuple[float, tuple[float, ...]]:
    best_j = -np.inf
    best_tau: tuple[float, ...] | None = None
    for tau in taus:
        j = _objective_packed(packed, np.asarray(tau), beta)
        if j > best_j or (j == best_j and tau < best_tau):
            best_j, best_tau = j, tau
    return best_j, best_tau


def _grid_worker(args) -> tuple[float, tuple[float, ...]]:
    packed_fields, taus, beta = args
    return _grid_chunk_best(_Packed(*packed_fields), taus, beta)


def grid_search(candidates: Sequence[Sequence[float]], traces: TraceSet,
                config: ObjectiveConfig | None = None, *,
                max_combinations: int = 1_000_000,
                jobs: int = 1) -> tuple[ThresholdVector, float]:
    """Exhaustively score every combination of per-exit candidates.

    Ties on J resolve to the lexicographically smaller vector so results do
    not depend on enumeration order.
    """
    cfg = config or ObjectiveConfig()
    n = traces.profile.num_exits
    if len(candidates) != n - 1:
        raise ValueError(f"{len(candidates)} candidate lists for {n} exits, "
                         f"expected {n - 1}")
    for i, cand in enumerate(candidates):
        if not cand:
            raise ValueError(f"empty candidate list for exit {i + 1}")
    total = 1
    for cand in candidates:
        total *= len(cand)
    if total > max_combinations:
        raise ValueError(f"grid has {total} combinations, cap is {max_combinations}")

    packed = _pack(traces)
    combos = [tuple(float(v) for v in tau) for tau in itertools.product(*candidates)]
    for tau in combos:
        _threshold_array(tau, n)  # validate range before burning time

    if jobs > 1 and len(combos) > 1:
        chunk = max(1, -(-len(combos) // (jobs * 4)))
        fields = (packed.conf, packed.correct, packed.chat)
        tasks = [(fields, combos[i : i + chunk], cfg.beta_opt)
                 for i in range(0, len(combos), chunk)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_worker, tasks))
    else:
        results = [_grid_chunk_best(packed, combos, cfg.beta_opt)]

    best_j, best_tau = results[0]
    for j, tau in results[1:]:
        if j > best_j or (j == best_j and tau < best_tau):
            best_j, best_tau = j, tau
    return ThresholdVector(best_tau), best_j


# --- MDP route ---------------------------------------------------------------

def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((values * bins).astype(np.int64), bins - 1)


@dataclass(frozen=True)
class MdpModel:
    """Trace-backed decision process over (exit stage, difficulty bin, confidence bin)."""

    num_exits: int
    alpha_bins: int
    conf_bins: int
    beta_opt: float
    reward_exit: np.ndarray    # (N, Ba, Bc): bin accuracy minus cost, 0 where unvisited
    transitions: np.ndarray    # (N-1, Ba, Bc, Bc): conf-bin jump distribution to next stage
    supported: np.ndarray      # (N, Ba, Bc) bool: bin observed in the trace
    alpha_freq: np.ndarray     # (Ba,): empirical difficulty-bin distribution
    chat: np.ndarray           # (N,): normalised cumulative MACs

    def __post_init__(self) -> None:
        n, ba, bc = self.num_exits, self.alpha_bins, self.conf_bins
        if self.reward_exit.shape != (n, ba, bc):
            raise ValueError(f"reward_exit shape {self.reward_exit.shape}, "
                             f"expected {(n, ba, bc)}")
        if self.transitions.shape != (max(n - 1, 0), ba, bc, bc):
            raise ValueError(f"transitions shape {self.transitions.shape}, "
                             f"expected {(n - 1, ba, bc, bc)}")
        if self.transitions.size:
            if self.transitions.min() < 0.0:
                raise ValueError("negative transition probability")
            sums = self.transitions.sum(axis=-1)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise ValueError("transition rows must each sum to 1")


def build_mdp(traces: TraceSet, config: ObjectiveConfig | None = None,
              alpha_bins: int = 10, conf_bins: int = 10) -> MdpModel:
    """Estimate rewards and confidence-bin transitions from a labelled trace.

    Samples need stored difficulty scores; bins never observed keep zero
    reward, a uniform outgoing row, and supported=False.
    """
    cfg = config or ObjectiveConfig()
    if alpha_bins < 1 or conf_bins < 1:
        raise ValueError("bin counts must be >= 1")
    if not traces.samples:
        raise ValueError("empty trace set")
    n = traces.profile.num_exits
    conf, correct = traces.conf_matrix, traces.correct_matrix
    chat = np.asarray(traces.profile.normalized_macs)
    abin = _bin_index(traces.difficulties, alpha_bins)
    cbin = _bin_index(conf, conf_bins)

    reward = np.zeros((n, alpha_bins, conf_bins))
    supported = np.zeros((n, alpha_bins, conf_bins), dtype=bool)
    transitions = np.full((max(n - 1, 0), alpha_bins, conf_bins, conf_bins),
                          1.0 / conf_bins)
    for i in range(n):
        counts = np.zeros((alpha_bins, conf_bins))
        hits = np.zeros((alpha_bins, conf_bins))
        np.add.at(counts, (abin, cbin[:, i]), 1.0)
        np.add.at(hits, (abin, cbin[:, i]), correct[:, i].astype(np.float64))
        visited = counts > 0
        supported[i] = visited
        reward[i][visited] = hits[visited] / counts[visited] - cfg.beta_opt * chat[i]
        if i < n - 1:
            joint = np.zeros((alpha_bins, conf_bins, conf_bins))
            np.add.at(joint, (abin, cbin[:, i], cbin[:, i + 1]), 1.0)
            row_sums = joint.sum(axis=-1, keepdims=True)
            nonzero = row_sums[:, :, 0] > 0
            transitions[i][nonzero] = joint[nonzero] / row_sums[nonzero]

    alpha_freq = np.bincount(abin, minlength=alpha_bins) / len(traces.samples)
    return MdpModel(num_exits=n, alpha_bins=alpha_bins, conf_bins=conf_bins,
                    beta_opt=cfg.beta_opt, reward_exit=reward,
                    transitions=transitions, supported=supported,
                    alpha_freq=alpha_freq, chat=chat)


@dataclass(frozen=True)
class QTable:
    """Action values per (exit stage, difficulty bin, confidence bin)."""

    q_exit: np.ndarray       # (N, Ba, Bc)
    q_continue: np.ndarray   # (N-1, Ba, Bc); continuing is unavailable at the last exit
    values: np.ndarray       # (N, Ba, Bc): max over available actions
    gamma: float


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside [0, 1]")


def value_iterate(mdp: MdpModel, gamma: float = 1.0) -> QTable:
    """Solve the finite-horizon MDP exactly by backward induction over stages."""
    _check_gamma(gamma)
    n = mdp.num_exits
    values = np.zeros_like(mdp.reward_exit)
    q_cont = np.zeros((max(n - 1, 0),) + mdp.reward_exit.shape[1:])
    values[n - 1] = mdp.reward_exit[n - 1]
    for i in range(n - 2, -1, -1):
        q_cont[i] = gamma * np.einsum("acd,ad->ac", mdp.transitions[i], values[i + 1])
        values[i] = np.maximum(mdp.reward_exit[i], q_cont[i])
    return QTable(q_exit=mdp.reward_exit.copy(), q_continue=q_cont,
                  values=values, gamma=gamma)


def value_iterate_fixed_point(mdp: MdpModel, gamma: float = 1.0,
                              tol: float = 1e-9, max_iter: int = 1000) -> QTable:
    """Generic synchronous value iteration; must agree with backward induction."""
    _check_gamma(gamma)
    if tol <= 0.0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")
    n = mdp.num_exits
    values = np.zeros_like(mdp.reward_exit)
    q_cont = np.zeros((max(n - 1, 0),) + mdp.reward_exit.shape[1:])
    for _ in range(max_iter):
        if n > 1:
            q_cont = gamma * np.einsum("iacd,iad->iac", mdp.transitions, values[1:])
        new = mdp.reward_exit.copy()
        if n > 1:
            new[: n - 1] = np.maximum(new[: n - 1], q_cont)
        delta = np.abs(new - values).max()
        values = new
        if delta < tol:
            break
    return QTable(q_exit=mdp.reward_exit.copy(), q_continue=q_cont,
                  values=values, gamma=gamma)


def extract_thresholds(qtable: QTable, mdp: MdpModel,
                       traces: TraceSet | None = None) -> ThresholdVector:
    """Collapse the Q-table into one confidence threshold per early exit.

    A scalar threshold can only express an upward-closed set of confidence
    bins, so per (exit, difficulty bin) the threshold is the lower edge of the
    topmost all-exit run: the lowest supported bin from which exiting is at
    least as good as continuing in every supported bin up to the top.  Bins
    never observed in the trace carry no evidence and are skipped; isolated
    exit-preferring bins below the run are not expressible and are dropped
    with a warning.  Per-bin thresholds are then averaged under the empirical
    difficulty-bin distribution.
    """
    n, ba, bc = mdp.num_exits, mdp.alpha_bins, mdp.conf_bins
    if traces is not None:
        alpha_freq = (np.bincount(_bin_index(traces.difficulties, ba), minlength=ba)
                      / len(traces.samples))
    else:
        alpha_freq = mdp.alpha_freq
    non_monotone = 0
    taus: list[float] = []
    for i in range(n - 1):
        prefer_exit = (qtable.q_exit[i] >= qtable.q_continue[i]) & mdp.supported[i]
        per_bin = np.ones(ba)
        for a in range(ba):
            hits = np.flatnonzero(prefer_exit[a])
            if hits.size == 0:
                continue  # never exit here: threshold stays 1.0
            start = -1
            for b in np.flatnonzero(mdp.supported[i, a])[::-1]:
                if not prefer_exit[a, b]:
                    break
                start = b
            if start >= 0:
                per_bin[a] = start / bc
            if hits[0] != start:
                non_monotone += 1
        taus.append(min(max(float(alpha_freq @ per_bin), 0.0), 1.0))
    if non_monotone:
        logger.warning("exit preference not monotone in confidence for %d "
                       "(exit, difficulty-bin) pairs; keeping the contiguous "
                       "top run and dropping lower bins",
                       non_monotone)
    return ThresholdVector(tuple(taus))
