from __future__ import annotations

import io
import json

import numpy as np
import pytest

from dart.adaptive import AdaptationConfig, CoefficientSet
from dart.engine import (ExitOutcome, ExitPolicy, decide_exit,
                         effective_thresholds, load_policy, read_outcomes,
                         save_policy, simulate, write_adaptation_log,
                         write_outcomes)
from dart.optimizer import ObjectiveConfig, evaluate_objective
from dart.trace import SampleRecord, TraceFormatError, synth_trace, write_trace
from conftest import make_trace


class TestExitPolicy:
    def test_defaults_to_unit_coefficients(self):
        p = ExitPolicy(thresholds=(0.5, 0.6))
        assert p.coefficients.global_coeffs == [1.0, 1.0]
        assert p.num_exits == 3

    def test_threshold_range(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            ExitPolicy(thresholds=(0.5, 1.2))

    def test_coefficient_length_must_match(self):
        with pytest.raises(ValueError, match="coefficients"):
            ExitPolicy(thresholds=(0.5, 0.6),
                       coefficients=CoefficientSet.ones(3))

    def test_negative_beta_diff_rejected(self):
        with pytest.raises(ValueError, match="beta_diff"):
            ExitPolicy(thresholds=(0.5,), beta_diff=-0.1)


class TestEffectiveThresholds:
    def test_difficulty_shifts_up(self):
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.3)
        assert effective_thresholds(p, 0.5) == pytest.approx((0.65,))

    def test_zero_difficulty_keeps_base(self):
        p = ExitPolicy(thresholds=(0.5, 0.7), beta_diff=0.3)
        assert effective_thresholds(p, 0.0) == (0.5, 0.7)

    def test_clamped_to_one(self):
        p = ExitPolicy(thresholds=(0.6,),
                       coefficients=CoefficientSet(global_coeffs=[2.0]),
                       beta_diff=0.3)
        assert effective_thresholds(p, 1.0) == (1.0,)

    def test_clamped_to_zero(self):
        p = ExitPolicy(thresholds=(0.0,),
                       coefficients=CoefficientSet(global_coeffs=[0.5]),
                       beta_diff=0.0)
        assert effective_thresholds(p, 0.0) == (0.0,)

    def test_class_hint_selects_per_class_vector(self):
        cs = CoefficientSet(global_coeffs=[1.0], per_class={2: [0.8]})
        p = ExitPolicy(thresholds=(0.5,), coefficients=cs, beta_diff=0.0)
        assert effective_thresholds(p, 0.0, class_hint=2) == pytest.approx((0.4,))
        assert effective_thresholds(p, 0.0, class_hint=1) == (0.5,)

    def test_alpha_validated(self):
        p = ExitPolicy(thresholds=(0.5,))
        with pytest.raises(ValueError, match="alpha"):
            effective_thresholds(p, 1.5)


class TestDecideExit:
    def sample(self, conf, pred=None, label=0):
        pred = pred or [0] * len(conf)
        return SampleRecord("x", tuple(conf), tuple(pred), label=label)

    def profile(self, n=3):
        return make_trace([[0.5] * n], [[0] * n], [0]).profile

    def test_first_exit_above_threshold_wins(self):
        s = self.sample([0.9, 0.1, 0.1], pred=[2, 0, 0], label=2)
        out = decide_exit(s, (0.5, 0.5), self.profile())
        assert out.chosen_exit == 1
        assert out.prediction == 2
        assert out.correct is True
        assert out.macs == 1.0

    def test_strict_inequality_at_boundary(self):
        s = self.sample([0.5, 0.9, 0.1])
        out = decide_exit(s, (0.5, 0.5), self.profile())
        assert out.chosen_exit == 2  # 0.5 > 0.5 is false

    def test_falls_through_to_final(self):
        s = self.sample([0.2, 0.3, 0.4])
        out = decide_exit(s, (0.9, 0.9), self.profile())
        assert out.chosen_exit == 3
        assert out.time_ms == self.profile().cum_time_ms[-1]

    def test_threshold_one_never_exits_early(self):
        s = self.sample([1.0, 1.0, 0.2])
        out = decide_exit(s, (1.0, 1.0), self.profile())
        assert out.chosen_exit == 3

    def test_unlabeled_has_no_correctness(self):
        s = SampleRecord("x", (0.9, 0.1), (1, 0))
        out = decide_exit(s, (0.5,), self.profile(2))
        assert out.correct is None

    def test_threshold_count_validated(self):
        s = self.sample([0.9, 0.1, 0.1])
        with pytest.raises(ValueError, match="thresholds"):
            decide_exit(s, (0.5,), self.profile())


class TestSimulate:
    def test_static_policy_equals_final_exit_exactly(self):
        t = synth_trace(3, 997, 5, seed=40)
        p = ExitPolicy(thresholds=(1.0, 1.0), beta_diff=0.3)
        res = simulate(t, p)
        want_acc = int(t.correct_matrix[:, -1].sum()) / len(t)
        assert res.report.accuracy == want_acc
        assert res.report.mean_time_ms == t.profile.cum_time_ms[-1]
        assert res.report.exit_histogram[-1] == 1.0

    def test_deterministic(self):
        t = synth_trace(3, 300, 5, seed=41)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.3)
        a = simulate(t, p)
        b = simulate(t, p)
        assert a.outcomes == b.outcomes

    def test_chosen_exit_is_minimal_satisfying_index(self):
        t = synth_trace(4, 500, 5, seed=42)
        p = ExitPolicy(thresholds=(0.5, 0.6, 0.7), beta_diff=0.2)
        res = simulate(t, p)
        for s, o in zip(t.samples, res.outcomes):
            eff = o.effective_thresholds
            for i in range(o.chosen_exit - 1):
                assert s.confidences[i] <= eff[i]
            if o.chosen_exit <= len(eff):
                assert s.confidences[o.chosen_exit - 1] > eff[o.chosen_exit - 1]

    def test_raising_thresholds_never_cheapens(self):
        t = synth_trace(3, 800, 5, seed=43)
        lo = simulate(t, ExitPolicy(thresholds=(0.4, 0.5), beta_diff=0.1))
        hi = simulate(t, ExitPolicy(thresholds=(0.7, 0.8), beta_diff=0.1))
        assert hi.report.mean_macs >= lo.report.mean_macs
        assert hi.report.mean_time_ms >= lo.report.mean_time_ms

    def test_beta_zero_ignores_difficulty_source(self):
        t = synth_trace(3, 300, 5, seed=44)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.0)
        stored = simulate(t, p, difficulty_source="stored")
        const = simulate(t, p, difficulty_source=0.9)
        assert [o.chosen_exit for o in stored.outcomes] \
            == [o.chosen_exit for o in const.outcomes]

    def test_accuracy_matches_objective_accuracy_term(self):
        t = synth_trace(3, 600, 5, seed=45)
        tau = (0.55, 0.65)
        p = ExitPolicy(thresholds=tau, beta_diff=0.0)
        res = simulate(t, p)
        j_acc = evaluate_objective(tau, t, ObjectiveConfig(beta_opt=0.0))
        assert res.report.accuracy == pytest.approx(j_acc, abs=1e-12)

    def test_missing_difficulty_with_positive_beta_errors(self):
        t = make_trace([[0.5, 0.9]] * 3, [[0, 0]] * 3, [0] * 3, num_classes=2)
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.3)
        with pytest.raises(ValueError, match="difficulty"):
            simulate(t, p)

    def test_missing_difficulty_with_zero_beta_is_fine(self):
        t = make_trace([[0.5, 0.9]] * 3, [[0, 0]] * 3, [0] * 3, num_classes=2)
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.0)
        res = simulate(t, p)
        assert res.report.mean_difficulty is None

    def test_constant_difficulty_source(self):
        t = synth_trace(3, 100, 5, seed=46)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.3)
        res = simulate(t, p, difficulty_source=0.25)
        assert res.report.mean_difficulty == pytest.approx(0.25)
        assert all(o.difficulty == 0.25 for o in res.outcomes)

    def test_image_difficulty_source(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = []
        for i in range(4):
            raster = bytes(rng.integers(0, 256, size=36, dtype=np.uint8))
            (tmp_path / f"im{i}.pgm").write_bytes(b"P5 6 6 255\n" + raster)
            samples.append(SampleRecord(f"s{i}", (0.4, 0.9), (0, 0), label=0,
                                        image_ref=f"im{i}.pgm"))
        t = make_trace([[0.4, 0.9]], [[0, 0]], [0], num_classes=2)
        t.samples = samples
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.3)
        res = simulate(t, p, difficulty_source="image", base_dir=tmp_path)
        assert res.report.overhead_ms > 0.0
        assert all(o.difficulty is not None for o in res.outcomes)
        # charged costs never include the overhead
        assert res.report.mean_time_ms <= t.profile.cum_time_ms[-1]

    def test_stored_wins_under_auto(self, tmp_path):
        s = SampleRecord("a", (0.4, 0.9), (0, 0), label=0,
                         difficulty=0.75, image_ref="missing.pgm")
        t = make_trace([[0.4, 0.9]], [[0, 0]], [0], num_classes=2)
        t.samples = [s]
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.3)
        res = simulate(t, p, base_dir=tmp_path)  # never touches the image
        assert res.outcomes[0].difficulty == 0.75

    def test_input_policy_never_mutated_by_adaptation(self):
        t = synth_trace(3, 400, 5, seed=47)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.0)
        res = simulate(t, p, adaptation=AdaptationConfig(strategy="both",
                                                         cadence=50))
        assert p.coefficients.global_coeffs == [1.0, 1.0]
        assert p.coefficients.per_class == {}
        assert res.coefficients is not p.coefficients
        assert len(res.adaptation_events) > 0

    def test_adaptation_applies_to_next_sample(self):
        # two identical samples, cadence 1: the first outcome (correct,
        # accuracy 1.0 > target) must lower the thresholds seen by sample 2
        t = make_trace([[0.6, 0.9], [0.6, 0.9]], [[0, 0], [0, 0]], [0, 0],
                       num_classes=2, difficulties=[0.0, 0.0])
        p = ExitPolicy(thresholds=(0.7,), beta_diff=0.0)
        res = simulate(t, p, adaptation=AdaptationConfig(strategy="temporal",
                                                         cadence=1))
        eff1 = res.outcomes[0].effective_thresholds[0]
        eff2 = res.outcomes[1].effective_thresholds[0]
        assert eff1 == 0.7
        assert eff2 < eff1

    def test_empty_trace_rejected(self):
        t = make_trace([[0.5, 0.9]], [[0, 0]], [0], num_classes=2)
        t.samples = []
        p = ExitPolicy(thresholds=(0.5,), beta_diff=0.0)
        with pytest.raises(ValueError, match="outcomes"):
            simulate(t, p)


class TestPolicyIO:
    def test_round_trip(self):
        cs = CoefficientSet(global_coeffs=[1.1, 0.9],
                            per_class={0: [1.0, 1.0], 7: [0.8, 1.2]})
        p = ExitPolicy(thresholds=(0.45, 0.55), coefficients=cs,
                       beta_diff=0.25, meta={"method": "grid"})
        buf = io.StringIO()
        save_policy(p, buf)
        buf.seek(0)
        q = load_policy(buf)
        assert q.thresholds == p.thresholds
        assert q.beta_diff == p.beta_diff
        assert q.coefficients.global_coeffs == cs.global_coeffs
        assert q.coefficients.per_class == cs.per_class
        assert q.meta == {"method": "grid"}

    def test_per_class_keys_are_ints_after_load(self):
        text = json.dumps({"thresholds": [0.5], "beta_diff": 0.1,
                           "coefficients": {"global": [1.0],
                                            "per_class": {"3": [0.9]}}})
        p = load_policy(io.StringIO(text))
        assert p.coefficients.per_class == {3: [0.9]}

    def test_minimal_policy_gets_defaults(self):
        p = load_policy(io.StringIO(json.dumps({"thresholds": [0.4, 0.6]})))
        assert p.coefficients.global_coeffs == [1.0, 1.0]
        assert p.beta_diff == 0.3

    def test_invalid_json_rejected(self):
        with pytest.raises(ValueError, match="JSON"):
            load_policy(io.StringIO("{nope"))

    def test_out_of_range_threshold_rejected(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            load_policy(io.StringIO(json.dumps({"thresholds": [1.4]})))


class TestOutcomeIO:
    def test_round_trip(self):
        t = synth_trace(3, 50, 5, seed=48)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.3)
        res = simulate(t, p)
        buf = io.StringIO()
        write_outcomes(res.outcomes, buf)
        buf.seek(0)
        assert read_outcomes(buf) == res.outcomes

    def test_unlabeled_outcome_omits_correct_key(self):
        o = ExitOutcome(sample_id="a", chosen_exit=1, prediction=2,
                        correct=None, effective_thresholds=(0.5,),
                        time_ms=0.1, energy_mj=1.0, macs=10.0)
        buf = io.StringIO()
        write_outcomes([o], buf)
        obj = json.loads(buf.getvalue())
        assert "correct" not in obj and "difficulty" not in obj

    def test_bad_line_is_named(self):
        buf = io.StringIO('{"id": "a", "exit": 1, "pred": 0, "time_ms": 0.1, '
                          '"energy_mj": 1.0, "macs": 5.0}\n{"id": "b"}\n')
        with pytest.raises(TraceFormatError, match="line 2"):
            read_outcomes(buf)


class TestAdaptationLog:
    def test_log_lines_match_events(self):
        t = synth_trace(3, 300, 5, seed=49)
        p = ExitPolicy(thresholds=(0.6, 0.7), beta_diff=0.0)
        res = simulate(t, p, adaptation=AdaptationConfig(strategy="both",
                                                         cadence=100))
        buf = io.StringIO()
        write_adaptation_log(res.adaptation_events, buf)
        lines = [json.loads(x) for x in buf.getvalue().splitlines()]
        assert len(lines) == len(res.adaptation_events)
        for obj, event in zip(lines, res.adaptation_events):
            assert obj["strategy"] == event.strategy
            assert obj["scope"] == event.scope
            assert obj["old"] == list(event.old)
            assert obj["new"] == list(event.new)
