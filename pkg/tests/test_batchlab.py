import csv
import json
import math

import numpy as np
import pytest

import batchlab
from batchlab import CostModel, CurveError, PiecewiseFit, TradeoffPoint, UnreachableThresholdError
from checks import TOY_BATCHES, dominance_frontier
from model import LossTrace


def _trace(batch_size, smoothed, every=10):
    records = [{"step": i * every, "tokens": i * every * batch_size, "raw": v, "smoothed": v}
               for i, v in enumerate(smoothed)]
    return LossTrace.from_records(records, batch_size=batch_size)


def _fit(b_star, m, t_star=1e10):
    c = math.log(b_star)
    b1 = math.log(t_star)
    return PiecewiseFit(b_star=b_star, b1=b1, m=m, b2=b1 - c - m * c, sse=0.0)


class TestStepsToLoss:
    def test_exact_sample(self):
        assert batchlab.steps_to_loss(_trace(4, [1.0, 0.5, 0.25]), 0.5) == 10

    def test_log_interpolation(self):
        # log-linear crossing at 10 * log(0.7) / log(0.5) = 5.146
        assert batchlab.steps_to_loss(_trace(4, [1.0, 0.5, 0.25]), 0.7) == 6

    def test_first_sample(self):
        assert batchlab.steps_to_loss(_trace(4, [1.0, 0.5]), 1.0) == 0

    def test_never_reached(self):
        assert batchlab.steps_to_loss(_trace(4, [1.0, 0.5]), 0.1) is None

    def test_invalid(self):
        with pytest.raises(CurveError):
            batchlab.steps_to_loss(_trace(4, []), 0.5)
        with pytest.raises(CurveError):
            batchlab.steps_to_loss(_trace(4, [1.0]), 0.0)


class TestCurves:
    def test_build(self):
        traces = {8: _trace(8, [1.0, 0.5, 0.25]), 16: _trace(16, [1.0, 0.25]), 32: _trace(32, [1.0, 0.9])}
        curve = batchlab.build_sweep_curve(traces, 0.5)
        assert [p.batch_size for p in curve.points] == [8, 16, 32]
        assert curve.point(8).steps == 10
        assert curve.point(16).steps == 5
        assert not curve.point(32).reached and curve.point(32).tokens is None
        for p in curve.reached():
            assert p.tokens == p.batch_size * p.steps

    def test_batch_key_must_match_trace(self):
        with pytest.raises(CurveError):
            batchlab.build_sweep_curve({8: _trace(16, [1.0])}, 0.5)

    def test_unreachable_reports_range(self):
        traces = {8: _trace(8, [1.0, 0.6]), 16: _trace(16, [0.9, 0.7])}
        with pytest.raises(UnreachableThresholdError) as info:
            batchlab.build_sweep_curve(traces, 0.1)
        assert info.value.lowest == 0.6
        assert info.value.highest == 1.0
        assert "0.6" in str(info.value)

    def test_sizes_must_increase(self):
        with pytest.raises(CurveError):
            batchlab.SweepCurve(1.0, (batchlab.CurvePoint(8, 1.0, 8.0), batchlab.CurvePoint(8, 1.0, 8.0)))

    def test_token_optimal_is_largest_within_tolerance(self):
        curve = batchlab.curve_from_steps(1.0, {1: 100.0, 2: 50.0, 4: 25.1, 8: 20.0})
        assert batchlab.token_optimal_batch(curve) == 4
        assert batchlab.token_optimal_batch(curve, rel_tol=0.0) == 2

    def test_token_optimal_takes_the_largest_of_equal_minima(self):
        curve = batchlab.curve_from_steps(1.0, {1_000_000: 3.5, 2_000_000: 2.0, 3_500_000: 1.0, 5_000_000: 1.0})
        assert batchlab.token_optimal_batch(curve, rel_tol=0.0) == 3_500_000

    def test_token_optimal_flat_and_v_shaped(self):
        flat = batchlab.curve_from_steps(1.0, {8: 64.0, 16: 32.0, 32: 16.0})
        assert batchlab.token_optimal_batch(flat, rel_tol=0.0) == 32
        v_shaped = batchlab.curve_from_steps(1.0, {1_000_000: 3.0, 2_000_000: 1.0, 4_000_000: 0.75})
        assert batchlab.token_optimal_batch(v_shaped, rel_tol=0.0) == 2_000_000

    def test_token_optimal_needs_reached_point(self):
        with pytest.raises(CurveError):
            batchlab.token_optimal_batch(batchlab.curve_from_steps(1.0, {8: None}))

    def test_ratio_and_advantage(self):
        adamw = batchlab.curve_from_steps(0.5, {8: 120.0, 16: 70.0, 32: None})
        muon = batchlab.curve_from_steps(0.5, {8: 100.0, 16: 50.0, 32: 30.0})
        ratio = batchlab.token_ratio(adamw, muon)
        assert [r.batch_size for r in ratio] == [8, 16]
        assert ratio[0].ratio == pytest.approx(1.2)
        assert ratio[1].excess == pytest.approx(0.4)
        assert batchlab.token_advantage(adamw, muon) == [(8, 160.0), (16, 320.0)]

    def test_ratio_requires_shared_threshold_and_points(self):
        a = batchlab.curve_from_steps(0.5, {8: 1.0})
        with pytest.raises(CurveError):
            batchlab.token_ratio(a, batchlab.curve_from_steps(0.4, {8: 1.0}))
        with pytest.raises(CurveError):
            batchlab.token_ratio(a, batchlab.curve_from_steps(0.5, {16: 1.0}))


class TestPiecewise:
    def test_noiseless_round_trip(self):
        fit = batchlab.fit_piecewise(batchlab.toy_curve(TOY_BATCHES, 2.0 ** 21, -0.5, 1e10))
        assert fit.b_star == pytest.approx(2.0 ** 21, rel=0.05)
        assert fit.m == pytest.approx(-0.5, abs=0.01)
        assert fit.t_star == pytest.approx(1e10, rel=1e-9)
        assert fit.continuity_residual() <= 1e-9
        assert fit.warnings == ()

    def test_noisy_slope(self):
        for seed in range(20):
            curve = batchlab.toy_curve(TOY_BATCHES, 2.0 ** 21, -0.5, 1e10, noise=0.01, seed=seed)
            assert batchlab.fit_piecewise(curve).m == pytest.approx(-0.5, abs=0.05)

    def test_perfect_scaling(self):
        curve = batchlab.curve_from_steps(1.0, {b: 1e6 / b for b in (8, 16, 32, 64, 128)})
        fit = batchlab.fit_piecewise(curve)
        assert fit.b_star == pytest.approx(128)
        assert any("no points beyond" in w for w in fit.warnings)
        report = batchlab.slope_minus_one_check(fit, curve)
        assert report.perfect_scaling
        assert report.left_exponent == pytest.approx(0.0, abs=0.02)
        assert report.right_exponent is None

    def test_slope_report_on_toy(self):
        curve = batchlab.toy_curve(TOY_BATCHES, 2.0 ** 21, -0.5, 1e10)
        report = batchlab.slope_minus_one_check(batchlab.fit_piecewise(curve), curve)
        assert report.perfect_scaling
        assert report.right_exponent == pytest.approx(0.5, abs=0.01)
        assert report.left_points == 7

    def test_round_trip_through_loss_traces(self):
        b_star, m, t_star = 2.0 ** 10, -0.5, 2.0 ** 20
        sizes = [2 ** p for p in range(3, 15)]
        traces = {}
        for batch_size in sizes:
            s = batchlab.toy_steps(batch_size, b_star, m, t_star)
            every = max(1, int(s) // 50)
            # log-linear loss crosses exp(-1) exactly at step s
            traces[batch_size] = _trace(batch_size, [math.exp(-i * every / s) for i in range(101)], every)
        curve = batchlab.build_sweep_curve(traces, math.exp(-1.0))
        assert len(curve.reached()) == len(sizes)
        fit = batchlab.fit_piecewise(curve)
        for batch_size in sizes:
            expected = batchlab.toy_steps(batch_size, b_star, m, t_star)
            assert batchlab.fit_steps(fit, batch_size) == pytest.approx(expected, rel=0.02)

    def test_needs_four_points(self):
        with pytest.raises(CurveError):
            batchlab.fit_piecewise(batchlab.curve_from_steps(1.0, {8: 10.0, 16: 5.0, 32: 3.0, 64: None}))

    def test_model_evaluation(self):
        fit = _fit(2.0 ** 10, -0.5, t_star=1000.0)
        assert batchlab.fit_tokens(fit, 2.0 ** 5) == pytest.approx(1000.0)
        assert batchlab.fit_tokens(fit, 2.0 ** 10) == pytest.approx(1000.0)
        assert batchlab.fit_tokens(fit, 2.0 ** 12) == pytest.approx(1000.0 * 2.0)
        assert batchlab.fit_steps(fit, 2.0 ** 12) == pytest.approx(batchlab.toy_steps(2.0 ** 12, 2.0 ** 10, -0.5, 1000.0))
        with pytest.raises(CurveError):
            batchlab.fit_tokens(fit, 0)


class TestRatioModel:
    fit_a = _fit(2.0 ** 18, -0.3)
    fit_m = _fit(2.0 ** 20, -0.5)

    @pytest.mark.parametrize("batch_size,expected", [(2.0 ** 17, 0.0), (2.0 ** 19, 0.7), (2.0 ** 22, 0.2)])
    def test_branch_slopes(self, batch_size, expected):
        h = 1e-4
        up = math.log(batchlab.ratio_model(self.fit_a, self.fit_m, batch_size * math.exp(h)))
        down = math.log(batchlab.ratio_model(self.fit_a, self.fit_m, batch_size * math.exp(-h)))
        numeric = (up - down) / (2 * h)
        assert numeric == pytest.approx(expected, abs=1e-6)
        assert batchlab.ratio_branch_slope(self.fit_a, self.fit_m, batch_size) == pytest.approx(expected)

    def test_ratio_never_below_one(self):
        for batch_size in np.logspace(3, 8, 60, base=2.0 ** 3):
            assert batchlab.ratio_model(self.fit_a, self.fit_m, batch_size) >= 1.0 - 1e-12

    def test_constant_ratio_iff_equal_slopes(self):
        same = _fit(2.0 ** 20, -0.3)
        assert batchlab.ratio_branch_slope(self.fit_a, same, 2.0 ** 22) == 0.0
        assert batchlab.ratio_branch_slope(self.fit_a, self.fit_m, 2.0 ** 22) != 0.0


class TestTradeoff:
    def test_device_rules(self):
        cost = CostModel()
        assert [cost.devices(b) for b in (8, 63, 64, 127, 128, 256, 511, 512, 4096)] == [8, 8, 16, 16, 32, 64, 64, 128, 128]
        llm = CostModel(device_rule=batchlab.LLM_DEVICE_RULE)
        assert llm.devices(2 ** 20 - 1) == 8
        assert llm.devices(2 ** 20) == 16
        assert llm.devices(2 ** 24) == 128
        assert cost.step_time(100) == pytest.approx(0.01 + 1e-6 * 100 / 16)

    @pytest.mark.parametrize("kwargs", [
        {"device_rule": ((128, 8), (64, 16))},
        {"device_rule": ((64, 16), (128, 8))},
        {"kappa": 0.0, "fixed_overhead": 0.0},
    ])
    def test_cost_validation(self, kwargs):
        with pytest.raises(CurveError):
            CostModel(**kwargs)

    def test_tradeoff_points(self):
        curve = batchlab.curve_from_steps(0.5, {32: 100.0, 64: 60.0, 128: None})
        points = batchlab.tradeoff_points(curve, CostModel())
        assert points[0].time == pytest.approx(100.0 * (0.01 + 1e-6 * 32 / 8))
        assert points[1].compute == pytest.approx(16 * points[1].time)
        assert not points[2].reached and math.isinf(points[2].time)

    def test_step_dominated_limit_halves_time_with_batch(self):
        cost = CostModel(kappa=0.0, fixed_overhead=0.01)
        curve = batchlab.curve_from_steps(0.5, {8: 1000.0, 16: 500.0, 32: 250.0})
        points = batchlab.tradeoff_points(curve, cost)
        assert [p.time for p in points] == pytest.approx([10.0, 5.0, 2.5])
        for small, large in zip(points, points[1:]):
            assert large.time / small.time == pytest.approx(0.5)

    def test_overhead_free_limit_makes_compute_track_tokens(self):
        kappa = 1e-3
        cost = CostModel(device_rule=((2, 1), (4, 2), (8, 4), (16, 8)), overflow_devices=16,
                         kappa=kappa, fixed_overhead=0.0)
        curve = batchlab.curve_from_steps(0.5, {1: 100.0, 2: 60.0, 4: 40.0, 8: 35.0})
        for p, c in zip(batchlab.tradeoff_points(curve, cost), curve.points):
            assert p.devices == p.batch_size
            assert p.time == pytest.approx(kappa * c.steps)
            assert p.compute == pytest.approx(kappa * c.tokens)

    def test_muon_frontier_dominates_on_critical_toy_curves(self):
        sizes = [2 ** p for p in range(3, 13)]
        # earlier breakpoint, shallower right slope and the same T* for the AdamW role
        adamw = batchlab.toy_curve(sizes, 64, -0.3, 1e4)
        muon = batchlab.toy_curve(sizes, 128, -0.5, 1e4)
        cost = CostModel()
        frontier_a = batchlab.pareto_frontier(batchlab.tradeoff_points(adamw, cost))
        frontier_m = batchlab.pareto_frontier(batchlab.tradeoff_points(muon, cost))
        strict = False
        for a in frontier_a:
            best = min((p.compute for p in frontier_m if p.time <= a.time), default=math.inf)
            assert best <= a.compute
            strict = strict or best < a.compute
        assert strict

    def test_frontier_example(self):
        raw = [(1.0, 10.0), (2.0, 5.0), (3.0, 6.0), (2.0, 5.0), (4.0, 1.0)]
        points = [TradeoffPoint(i, 1, 1.0, t, c, True) for i, (c, t) in enumerate(raw)]
        points.append(TradeoffPoint(99, 1, None, math.inf, math.inf, False))
        assert [p.batch_size for p in batchlab.pareto_frontier(points)] == [0, 1, 4]

    def test_frontier_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            size = int(rng.integers(1, 60))
            coords = rng.integers(1, 15, size=(size, 2)).astype(float)
            points = [TradeoffPoint(i, 1, 1.0, t, c, True) for i, (c, t) in enumerate(coords)]
            fast = [p.batch_size for p in batchlab.pareto_frontier(points)]
            assert fast == [p.batch_size for p in dominance_frontier(points)]


class TestAnalysis:
    @pytest.fixture
    def curves(self):
        sizes = [2 ** p for p in range(3, 11)]
        return {
            "adamw": batchlab.toy_curve(sizes, 64, -0.3, 1e4),
            "muon": batchlab.toy_curve(sizes, 128, -0.4, 1e4),
        }

    def test_analyze(self, curves):
        analysis = batchlab.analyze_threshold(curves, CostModel())
        assert set(analysis.fits) == {"adamw", "muon"}
        assert analysis.token_optimal == {"adamw": 64, "muon": 128}
        assert analysis.fits["muon"].b_star == pytest.approx(128, rel=0.05)
        assert [r.batch_size for r in analysis.ratio] == [2 ** p for p in range(3, 11)]
        errors = batchlab.consistency_errors(analysis)
        assert errors["tokens"] <= 1e-12 and errors["ratio"] <= 1e-12

    def test_mixed_thresholds(self, curves):
        curves["muon"] = batchlab.toy_curve([8, 16, 32, 64], 16, -0.5, 1e4, threshold=2.0)
        with pytest.raises(CurveError):
            batchlab.analyze_threshold(curves, CostModel())

    def test_unreached_curve_is_noted(self, curves):
        curves["muon"] = batchlab.curve_from_steps(1.0, {8: None, 16: None})
        analysis = batchlab.analyze_threshold(curves, CostModel())
        assert "muon" not in analysis.token_optimal
        assert any(note.startswith("muon") for note in analysis.notes)

    def test_exports(self, tmp_path, curves):
        analysis = batchlab.analyze_threshold(curves, CostModel())
        batchlab.write_curve_csv(tmp_path / "curves.csv", analysis.curves)
        batchlab.write_ratio_csv(tmp_path / "ratio.csv", analysis.ratio, analysis.advantage)
        batchlab.write_tradeoff_csv(tmp_path / "tradeoff.csv", analysis)
        batchlab.write_summary_json(tmp_path / "summary.json", analysis)
        with (tmp_path / "curves.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["optimizer", "batch_size", "steps", "tokens", "status"]
        assert len(rows) == 1 + 16
        with (tmp_path / "tradeoff.csv").open() as handle:
            header = next(csv.reader(handle))
        assert header == ["optimizer", "batch_size", "devices", "steps", "time", "compute", "frontier"]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["token_optimal_batch"] == {"adamw": 64, "muon": 128}
        assert summary["consistency"]["tokens"] <= 1e-12

    def test_threshold_met_before_training(self):
        curves = {
            "adamw": batchlab.curve_from_steps(1.0, {8: 0, 16: 10.0}),
            "muon": batchlab.curve_from_steps(1.0, {8: 0, 16: 5.0}),
        }
        analysis = batchlab.analyze_threshold(curves, CostModel())
        assert [r.batch_size for r in analysis.ratio] == [16]
        assert analysis.token_optimal == {"adamw": 8, "muon": 8}
        assert batchlab.consistency_errors(analysis) == {"tokens": 0.0, "ratio": 0.0}
