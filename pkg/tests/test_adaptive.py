from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dart.adaptive import (COEFF_MAX, COEFF_MIN, STRATEGIES, AdaptationConfig,
                           AdaptationManager, BanditState, CoefficientSet,
                           SlidingWindow, WindowEntry, bandit_reward,
                           class_update, performance_signal, temporal_update,
                           ucb_select)


def entry(exit_index=1, class_label=0, correct=True, confidence=0.9, cost=0.5):
    return WindowEntry(exit_index, class_label, correct, confidence, cost)


class TestCoefficientSet:
    def test_range_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            CoefficientSet(global_coeffs=[0.4])
        with pytest.raises(ValueError, match="outside"):
            CoefficientSet(global_coeffs=[1.0], per_class={3: [2.5]})

    def test_per_class_length_must_match(self):
        with pytest.raises(ValueError, match="entries"):
            CoefficientSet(global_coeffs=[1.0, 1.0], per_class={0: [1.0]})

    def test_for_class_falls_back_to_global(self):
        cs = CoefficientSet(global_coeffs=[1.1], per_class={2: [0.9]})
        assert cs.for_class(2) == [0.9]
        assert cs.for_class(5) == [1.1]
        assert cs.for_class(None) == [1.1]

    def test_ensure_class_copies_current_global(self):
        cs = CoefficientSet(global_coeffs=[1.2, 0.8])
        vec = cs.ensure_class(4)
        assert vec == [1.2, 0.8]
        vec[0] = 1.5
        assert cs.global_coeffs == [1.2, 0.8]

    def test_copy_is_deep(self):
        cs = CoefficientSet(global_coeffs=[1.0], per_class={0: [1.1]})
        dup = cs.copy()
        dup.per_class[0][0] = 1.9
        assert cs.per_class[0] == [1.1]


class TestSlidingWindow:
    def test_fifo_eviction(self):
        w = SlidingWindow(capacity=3)
        for i in range(4):
            w.push(entry(class_label=i))
        assert len(w) == 3
        assert [e.class_label for e in w] == [1, 2, 3]

    def test_stats_all_correct(self):
        w = SlidingWindow(10)
        for _ in range(5):
            w.push(entry(correct=True, confidence=0.8, cost=0.4))
        st_ = w.stats()
        assert st_.count == 5
        assert st_.accuracy == 1.0
        assert st_.mean_confidence == pytest.approx(0.8)
        assert st_.mean_cost == pytest.approx(0.4)

    def test_empty_filter_returns_none(self):
        w = SlidingWindow(10)
        w.push(entry(class_label=1))
        assert w.stats(class_label=2) is None
        assert w.stats(exit_index=9) is None

    def test_filtered_stats_match_recount(self, rng):
        w = SlidingWindow(1000)
        entries = []
        for _ in range(100):
            e = entry(exit_index=int(rng.integers(1, 4)),
                      class_label=int(rng.integers(0, 3)),
                      correct=bool(rng.random() < 0.7),
                      confidence=float(rng.random()),
                      cost=float(rng.random()))
            entries.append(e)
            w.push(e)
        sel = [e for e in entries if e.exit_index == 2 and e.class_label == 1]
        got = w.stats(exit_index=2, class_label=1)
        if not sel:
            assert got is None
        else:
            assert got.count == len(sel)
            assert got.accuracy == pytest.approx(
                sum(e.correct for e in sel) / len(sel))
            assert got.mean_cost == pytest.approx(
                sum(e.cost for e in sel) / len(sel))

    def test_capacity_validation(self):
        with pytest.raises(ValueError, match="capacity"):
            SlidingWindow(0)


class TestTemporalUpdate:
    def test_full_decay_keeps_previous(self):
        assert temporal_update(1.3, 0.7, decay=1.0) == 1.3

    def test_zero_decay_jumps_to_signal(self):
        assert temporal_update(1.3, 0.7, decay=0.0) == 0.7

    def test_worked_example(self):
        # accuracy 0.95 against target 0.85: signal 0.9, one step from 1.0
        signal = performance_signal(0.95, target=0.85)
        assert signal == pytest.approx(0.9)
        assert temporal_update(1.0, signal, decay=0.95) == pytest.approx(0.995)

    def test_clamped_at_bounds(self):
        assert temporal_update(COEFF_MAX, 5.0, decay=0.5) == COEFF_MAX
        assert temporal_update(COEFF_MIN, -3.0, decay=0.5) == COEFF_MIN

    def test_geometric_convergence_to_signal(self):
        c = 1.0
        for _ in range(500):
            c = temporal_update(c, 0.8, decay=0.9)
        assert c == pytest.approx(0.8, abs=1e-6)

    def test_decay_validated(self):
        with pytest.raises(ValueError, match="decay"):
            temporal_update(1.0, 1.0, decay=1.5)


class TestClassUpdate:
    def test_at_target_is_noop(self):
        assert class_update([1.0, 1.2], 0.85, target=0.85, rate=0.05) == [1.0, 1.2]

    def test_above_target_lowers(self):
        got = class_update([1.0], 1.0, target=0.85, rate=0.1)
        assert got[0] == pytest.approx(1.0 - 0.1 * 0.15)

    def test_below_target_raises(self):
        got = class_update([1.0], 0.15, target=0.85, rate=0.05)
        assert got[0] == pytest.approx(1.0 + 0.05 * 0.7)

    def test_clamped(self):
        assert class_update([COEFF_MIN], 1.0, rate=10.0) == [COEFF_MIN]
        assert class_update([COEFF_MAX], 0.0, rate=10.0) == [COEFF_MAX]

    def test_rate_validated(self):
        with pytest.raises(ValueError, match="rate"):
            class_update([1.0], 0.5, rate=0.0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(COEFF_MIN, COEFF_MAX), min_size=1, max_size=4),
           st.floats(0, 1), st.floats(0, 1),
           st.floats(0.001, 10.0))
    def test_never_leaves_bounds(self, coeffs, acc, target, rate):
        out = class_update(coeffs, acc, target=target, rate=rate)
        assert all(COEFF_MIN <= c <= COEFF_MAX for c in out)


class TestUcb:
    def test_untried_arms_first_in_index_order(self):
        b = BanditState(("a", "b", "c"))
        assert ucb_select(b) == 0
        bandit_reward(b, 0, 0.5, 0.0)
        assert ucb_select(b) == 1
        bandit_reward(b, 1, 0.5, 0.0)
        assert ucb_select(b) == 2

    def test_equal_counts_pick_higher_mean(self):
        b = BanditState(("a", "b"))
        bandit_reward(b, 0, 0.9, 0.0)
        bandit_reward(b, 1, 0.2, 0.0)
        assert ucb_select(b) == 0

    def test_exploration_bonus_can_override_mean(self):
        b = BanditState(("often", "rare"))
        for _ in range(100):
            bandit_reward(b, 0, 0.6, 0.0)
        bandit_reward(b, 1, 0.5, 0.0)
        # rare arm: 0.5 + sqrt(2 ln 101 / 1) >> often arm's bound
        assert ucb_select(b) == 1

    def test_tie_breaks_to_lowest_index(self):
        b = BanditState(("a", "b"))
        bandit_reward(b, 0, 0.5, 0.0)
        bandit_reward(b, 1, 0.5, 0.0)
        assert ucb_select(b) == 0

    def test_no_arms_rejected(self):
        with pytest.raises(ValueError, match="arms"):
            BanditState(())

    def test_reward_formula_and_running_mean(self):
        b = BanditState(("a",))
        r1 = bandit_reward(b, 0, accuracy=0.7, norm_cost=0.0)
        assert r1 == pytest.approx(0.7)
        r2 = bandit_reward(b, 0, accuracy=0.8, norm_cost=1.0, beta_opt=0.3)
        assert r2 == pytest.approx(0.5)
        assert b.means[0] == pytest.approx(0.6)
        assert b.counts[0] == 2 and b.total == 2

    def test_running_mean_matches_batch_mean(self, rng):
        b = BanditState(("a",))
        rewards = []
        for _ in range(50):
            acc, cost = float(rng.random()), float(rng.random())
            rewards.append(bandit_reward(b, 0, acc, cost))
        assert b.means[0] == pytest.approx(sum(rewards) / len(rewards), abs=1e-12)

    def test_unknown_arm_rejected(self):
        b = BanditState(("a",))
        with pytest.raises(ValueError, match="arm"):
            bandit_reward(b, 3, 0.5, 0.0)

    def test_bernoulli_bandit_prefers_better_arm(self, rng):
        # small version of the acceptance check
        b = BanditState(("good", "bad"))
        pulls = [0, 0]
        for _ in range(2000):
            arm = ucb_select(b)
            pulls[arm] += 1
            p = 0.8 if arm == 0 else 0.2
            bandit_reward(b, arm, float(rng.random() < p), 0.0)
        assert pulls[0] > pulls[1]


class TestAdaptationConfig:
    def test_strategy_validated(self):
        with pytest.raises(ValueError, match="strategy"):
            AdaptationConfig(strategy="yolo")

    def test_cadence_validated(self):
        with pytest.raises(ValueError, match="cadence"):
            AdaptationConfig(cadence=0)


class TestAdaptationManager:
    def run_stream(self, manager, n, correct=True, label=0, conf=0.95, cost=0.5):
        for _ in range(n):
            manager.observe(exit_index=1, prediction=label if correct else label + 1,
                            confidence=conf, cost=cost, label=label)

    def test_no_update_before_cadence(self):
        cs = CoefficientSet.ones(2)
        m = AdaptationManager(cs, AdaptationConfig(strategy="both", cadence=100))
        self.run_stream(m, 99)
        assert cs.global_coeffs == [1.0, 1.0]
        assert m.events == []

    def test_update_fires_on_cadence(self):
        cs = CoefficientSet.ones(2)
        m = AdaptationManager(cs, AdaptationConfig(strategy="temporal", cadence=50))
        self.run_stream(m, 50)  # window accuracy 1.0 > target: coefficients drop
        assert len(m.events) == 1
        assert m.events[0].scope == "global"
        assert all(c < 1.0 for c in cs.global_coeffs)

    def test_class_strategy_specialises_per_class(self):
        cs = CoefficientSet.ones(1)
        m = AdaptationManager(cs, AdaptationConfig(strategy="class", cadence=10))
        for i in range(10):
            label = i % 2
            # class 0 always right, class 1 always wrong
            m.observe(exit_index=1, prediction=label if label == 0 else 0,
                      confidence=0.9, cost=0.5, label=label)
        assert cs.per_class[0][0] < 1.0 < cs.per_class[1][0]
        assert cs.global_coeffs == [1.0]

    def test_frozen_strategy_never_touches_coefficients(self):
        cs = CoefficientSet.ones(2)
        m = AdaptationManager(cs, AdaptationConfig(strategy="frozen", cadence=10))
        self.run_stream(m, 200, correct=False)
        assert cs.global_coeffs == [1.0, 1.0]
        assert cs.per_class == {}
        assert m.events == []

    def test_unlabeled_low_confidence_ignored(self):
        cs = CoefficientSet.ones(1)
        m = AdaptationManager(cs, AdaptationConfig(strategy="both", cadence=10,
                                                   pseudo_label_threshold=0.9))
        for _ in range(20):
            m.observe(exit_index=1, prediction=0, confidence=0.5,
                      cost=0.5, label=None)
        assert len(m.window) == 0
        assert cs.global_coeffs == [1.0]  # no stats, so events skip

    def test_unlabeled_confident_becomes_pseudo_label(self):
        cs = CoefficientSet.ones(1)
        m = AdaptationManager(cs, AdaptationConfig(strategy="class", cadence=10))
        for _ in range(10):
            m.observe(exit_index=1, prediction=7, confidence=0.95,
                      cost=0.5, label=None)
        # pseudo-labelled entries count as correct, so class 7 relaxes
        assert m.window.stats(class_label=7).accuracy == 1.0
        assert cs.per_class[7][0] < 1.0

    def test_events_record_old_and_new(self):
        cs = CoefficientSet.ones(1)
        m = AdaptationManager(cs, AdaptationConfig(strategy="temporal",
                                                   cadence=25, decay=0.9))
        self.run_stream(m, 25)
        e = m.events[0]
        assert e.old == (1.0,)
        assert e.new[0] == pytest.approx(temporal_update(1.0,
                                                         performance_signal(1.0),
                                                         0.9))
        assert e.inference_count == 25

    def test_bandit_mode_cycles_arms_then_records(self):
        cs = CoefficientSet.ones(1)
        m = AdaptationManager(cs, AdaptationConfig(strategy="both", use_bandit=True,
                                                   cadence=10))
        assert m.strategy == STRATEGIES[0]  # untried arms tried in order
        self.run_stream(m, 40)
        assert m.bandit.total == 4
        assert all(c == 1 for c in m.bandit.counts)

    def test_coefficients_stay_bounded_under_noise(self, rng):
        cs = CoefficientSet.ones(2)
        m = AdaptationManager(cs, AdaptationConfig(strategy="both", cadence=5,
                                                   rate=5.0))
        for _ in range(500):
            m.observe(exit_index=int(rng.integers(1, 3)),
                      prediction=int(rng.integers(0, 3)),
                      confidence=float(rng.random()),
                      cost=float(rng.random()),
                      label=int(rng.integers(0, 3)))
        for vec in [cs.global_coeffs, *cs.per_class.values()]:
            assert all(COEFF_MIN <= c <= COEFF_MAX for c in vec)
