import numpy as np
import pytest

from depthmvd.errors import NoValidPixels, ShapeMismatch
from depthmvd.metrics import (
    DEFAULT_LEVELS,
    CalibrationReport,
    binned_error_vs_confidence,
    delta1_accuracy,
    ece_delta,
    ece_quantile,
    entropy_histogram,
    evaluate,
    nll,
)


class TestDelta1:
    def test_exact_prediction(self):
        gt = np.full((10, 10), 2.0)
        assert delta1_accuracy(gt.copy(), gt) == 1.0

    def test_ratio_above_threshold(self):
        gt = np.full((10, 10), 2.0)
        assert delta1_accuracy(1.3 * gt, gt) == 0.0

    def test_half_and_half(self):
        gt = np.full((10, 10), 2.0)
        pred = gt.copy()
        pred[:, 5:] *= 2.0
        assert delta1_accuracy(pred, gt) == 0.5

    def test_no_valid_pixels(self):
        with pytest.raises(NoValidPixels):
            delta1_accuracy(np.full((3, 3), np.nan), np.full((3, 3), 2.0))


class TestNll:
    def test_closed_form_zero_error(self):
        gt = np.full((5, 5), 2.0)
        var = np.ones((5, 5))
        assert abs(nll(gt.copy(), var, gt) - 0.5 * np.log(2 * np.pi)) <= 1e-12

    def test_closed_form_unit_error(self):
        gt = np.full((5, 5), 2.0)
        var = np.ones((5, 5))
        expect = 0.5 * np.log(2 * np.pi) + 0.5
        assert abs(nll(gt + 1.0, var, gt) - expect) <= 1e-12

    def test_statistical_entropy_oracle(self, rng):
        # With gt ~ N(d, v), the mean NLL approaches the differential entropy.
        d = np.full(200_000, 3.0)
        v = np.full(200_000, 0.04)
        gt = d + rng.normal(scale=0.2, size=d.size)
        expect = 0.5 * np.log(2 * np.pi * np.e * 0.04)
        assert abs(nll(d, v, gt) - expect) <= 0.01

    def test_floor_prevents_infinite(self):
        gt = np.full((4, 4), 2.0)
        val = nll(gt + 0.1, np.zeros((4, 4)), gt)
        assert np.isfinite(val)

    def test_minimized_at_mse(self, rng):
        gt = np.full(5000, 2.0)
        pred = gt + rng.normal(scale=0.3, size=gt.size)
        mse = np.mean((pred - gt) ** 2)
        best = nll(pred, np.full(gt.size, mse), gt)
        for scale in [0.25, 0.5, 2.0, 4.0]:
            assert nll(pred, np.full(gt.size, mse * scale), gt) >= best


class TestEceQuantile:
    def test_self_calibration_oracle(self, rng):
        n = 100_000
        d = rng.uniform(1.0, 4.0, n)
        v = rng.uniform(0.01, 0.09, n)
        gt = d + rng.normal(size=n) * np.sqrt(v)
        scalar, curve = ece_quantile(d, v, gt)
        assert scalar < 0.01
        nominal = [p for p, _ in curve]
        empirical = [c for _, c in curve]
        assert nominal == sorted(nominal)
        assert all(b >= a - 1e-12 for a, b in zip(empirical, empirical[1:]))

    def test_degenerate_variance_half_split(self):
        n = 10_000
        d = np.full(n, 2.0)
        gt = d.copy()
        gt[: n // 2] += 0.3
        gt[n // 2 :] -= 0.3
        scalar, curve = ece_quantile(d, np.zeros(n), gt)
        # coverage is 0.5 at every level; the scalar is the mean |0.5 - p|
        expect = np.mean([abs(0.5 - p) for p in DEFAULT_LEVELS])
        assert abs(scalar - expect) <= 1e-9

    def test_median_curve_point(self, rng):
        n = 20_000
        d = np.full(n, 2.0)
        gt = d + rng.normal(scale=0.2, size=n) + 0.05
        _, curve = ece_quantile(d, np.full(n, 0.04), gt)
        c_at_half = dict((round(p, 2), c) for p, c in curve)[0.5]
        assert abs(c_at_half - np.mean(d - gt >= 0)) <= 1e-12

    def test_permutation_invariance(self, rng):
        n = 5000
        d = rng.uniform(1, 3, n)
        v = rng.uniform(0.01, 0.05, n)
        gt = d + rng.normal(size=n) * 0.1
        s1, _ = ece_quantile(d, v, gt)
        p = rng.permutation(n)
        s2, _ = ece_quantile(d[p], v[p], gt[p])
        assert abs(s1 - s2) <= 1e-12


class TestEceDelta:
    def test_self_calibration_oracle(self, rng):
        n = 100_000
        d = rng.uniform(1.0, 4.0, n)
        v = rng.uniform(0.01, 0.25, n)
        gt = d + rng.normal(size=n) * np.sqrt(v)
        scalar, _ = ece_delta(d, v, gt)
        assert scalar < 0.02

    def test_small_variance_exact_predictions(self, rng):
        n = 10_000
        d = rng.uniform(1.0, 4.0, n)
        scalar, _ = ece_delta(d, np.full(n, 1e-6), d.copy())
        assert scalar <= 1e-6

    def test_huge_variance_limit(self, rng):
        # q -> 0 for all pixels, so the scalar approaches the empirical
        # delta1 accuracy of the (single) occupied bin.
        n = 10_000
        d = np.full(n, 2.0)
        gt = d + rng.normal(scale=0.05, size=n)  # nearly all delta1-accurate
        scalar, curve = ece_delta(d, np.full(n, 1e6), gt)
        acc = np.mean(np.maximum(d / gt, gt / d) < 1.25)
        assert len(curve) == 1
        assert abs(scalar - abs(curve[0][0] - acc)) <= 1e-9
        assert scalar > 0.9

    def test_permutation_invariance(self, rng):
        n = 5000
        d = rng.uniform(1, 3, n)
        v = rng.uniform(0.01, 0.05, n)
        gt = d + rng.normal(size=n) * 0.1
        s1, _ = ece_delta(d, v, gt)
        p = rng.permutation(n)
        s2, _ = ece_delta(d[p], v[p], gt[p])
        assert abs(s1 - s2) <= 1e-12


class TestEntropyHistogram:
    def test_unit_variance_mass(self):
        var = np.ones((50, 50))
        out = entropy_histogram(var)
        expect = 0.5 * np.log(2 * np.pi * np.e)
        assert abs(out["mean_entropy"] - expect) <= 1e-9
        assert sum(out["counts"]) == 2500

    def test_doubling_shifts_by_half_log2(self, rng):
        var = rng.uniform(0.5, 2.0, (40, 40))
        a = entropy_histogram(var)["mean_entropy"]
        b = entropy_histogram(2 * var)["mean_entropy"]
        assert abs((b - a) - 0.5 * np.log(2)) <= 1e-9

    def test_counts_match_valid(self, rng):
        var = rng.uniform(0.1, 1.0, (20, 20))
        var[0, :5] = np.nan
        out = entropy_histogram(var)
        assert sum(out["counts"]) == 400 - 5 == out["pixel_count"]


class TestBinnedErrorVsConfidence:
    def test_flat_case(self, rng):
        n = 10_000
        d = np.full(n, 2.0)
        gt = d + rng.choice([-0.1, 0.1], size=n)
        rows = binned_error_vs_confidence(d, np.full(n, 0.02), gt, percentiles=5)
        nlls = [r["mean_nll"] for r in rows]
        assert max(nlls) - min(nlls) <= 0.05

    def test_overconfident_subset_flagged(self, rng):
        n = 10_000
        d = np.full(n, 2.0)
        gt = d + rng.normal(scale=0.05, size=n)
        var = np.full(n, 0.01)
        gt[:500] += 1.0  # large error, same low variance
        rows = binned_error_vs_confidence(d, var, gt, percentiles=10)
        assert rows[-1]["mean_nll"] == max(r["mean_nll"] for r in rows)
        assert rows[-1]["mean_nll"] > rows[0]["mean_nll"] + 1.0

    def test_group_sizes_balanced(self, rng):
        n = 10_007
        d = np.full(n, 2.0)
        gt = d + rng.normal(scale=0.1, size=n)
        rows = binned_error_vs_confidence(d, rng.uniform(0.01, 1, n), gt, percentiles=7)
        sizes = [r["count"] for r in rows]
        assert max(sizes) - min(sizes) <= 1


class TestEvaluate:
    def test_report_fields_finite_and_serializable(self, rng):
        n = 5000
        d = rng.uniform(1, 4, n)
        v = rng.uniform(0.01, 0.1, n)
        gt = d + rng.normal(size=n) * np.sqrt(v)
        report = evaluate(d, v, gt)
        assert isinstance(report, CalibrationReport)
        for val in (report.delta1, report.nll, report.ece_delta, report.ece_q):
            assert np.isfinite(val)
        assert 0 <= report.delta1 <= 1
        assert 0 <= report.ece_delta <= 1 and 0 <= report.ece_q <= 1
        assert report.pixel_count == n
        assert "nominal,empirical" in report.curve_csv("quantile")
        import json

        json.loads(report.to_json())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nll(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))
