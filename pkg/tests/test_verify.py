from __future__ import annotations

import json

import numpy as np
import pytest

from decssl.datagen import TheoryGenConfig, generate_theory_dataset
from decssl.fedsim import NumericalDivergence
from decssl.objectives import feature_correlation, linear_ssl_loss_expected, min_norm_factorize
from decssl.spectral import ssl_minimizer_oracle, symmetric_eig
from decssl.verify import (
    gradient_descent,
    prop1_source,
    random_psd_instance,
    theorem1_instance,
    verify_equivalence,
    verify_prop1,
    verify_theorem1,
)

from oracles import margin_qp_projected_gradient


class TestTheorem1:
    @pytest.mark.parametrize("K", [2, 3])
    def test_noise_free_gives_full_representability(self, K):
        # without noise every sample lies in span(e_0..e_{K-1}), which the
        # rank-2K oracle captures completely
        report = verify_theorem1([16, 32], K=K, seeds=range(3), majority_count=30, minority_count=3,
                                 threshold_from_d=16, mu_noise=0)
        for row in report.rows:
            assert np.allclose(row.local, 1.0, atol=1e-10)
            assert np.allclose(row.global_, 1.0, atol=1e-10)
        assert report.passed

    def test_bounds_on_noisy_instances(self):
        for seed in range(4):
            row = theorem1_instance(48, 3, 6, seed, majority_count=40, minority_count=4)
            assert max(row.global_) <= 1 + 1e-10 and min(row.global_) >= -1e-12
            assert np.max(row.local) <= 1 + 1e-10 and np.min(row.local) >= -1e-12
            owned_excluded = [row.local[k][i] for k in range(3) for i in range(3) if i != k]
            assert row.min_local_nonowned == min(owned_excluded)

    def test_report_shape_and_json(self):
        report = verify_theorem1([24, 12], K=2, seeds=[0, 1], majority_count=20, minority_count=2,
                                 threshold_from_d=24)
        assert sorted(report.medians) == [12, 24]
        assert [r.d for r in report.rows] == [12, 12, 24, 24]
        payload = json.loads(json.dumps(report.to_dict()))
        assert payload["passed"] == report.passed

    def test_rejects_small_d(self):
        with pytest.raises(ValueError):
            verify_theorem1([4], K=3)


class TestProp1:
    def test_single_source_puts_mass_on_its_direction(self):
        (ds,) = generate_theory_dataset(TheoryGenConfig(d=16, K=1, majority_count=20, mu_noise=0))
        corr, sol = prop1_source(ds, 1, 2)
        pair = min_norm_factorize(sol.w_tilde, 2)
        every = np.array([feature_correlation(pair, j) for j in range(16)])
        assert corr[0] == every[0]
        assert every[0] / every.sum() >= 0.99
        assert sol.objective == pytest.approx(margin_qp_projected_gradient(ds.samples, ds.labels, 2), rel=1e-4)

    def test_small_instance_report(self):
        report = verify_prop1(d=32, K=2, seeds=[0, 1], majority_count=30, minority_count=3)
        assert len(report.rows) == 4
        for row in report.rows:
            assert row.own >= 0 and all(c >= 0 for c in row.others)
            assert len(row.others) == len(row.ssl_others) == 1
            assert row.margin_violation <= 1e-8
            assert row.ratio == row.own / max(row.others)
        payload = json.loads(json.dumps(report.to_dict()))
        assert {"ratio_ok", "ssl_ok", "passed"} <= set(payload)

    def test_thresholds_drive_verdict(self):
        loose = verify_prop1(d=32, K=2, seeds=[0], majority_count=30, minority_count=3, factor=0.0,
                             ssl_threshold=0.0)
        assert loose.passed
        strict = verify_prop1(d=32, K=2, seeds=[0], majority_count=30, minority_count=3, factor=1e9)
        assert not strict.ratio_ok


class TestEquivalence:
    def test_diagonal_single_direction(self):
        X = np.diag([3.0, 2.0, 1.0, 0.5])
        report = verify_equivalence(m=1, covariance=X, steps=3000)
        assert report.angle <= 1e-2
        assert report.passed

    @pytest.mark.parametrize("seed", range(3))
    def test_random_instance_and_oracle_bound(self, seed):
        report = verify_equivalence(d=16, m=3, seed=seed, steps=3000)
        assert report.objective >= report.oracle_objective - 1e-9
        assert report.passed
        assert json.loads(json.dumps(report.to_dict()))["passed"]

    def test_doubling_steps_never_increases_objective(self):
        X = random_psd_instance(12, 2, 5)
        values = [verify_equivalence(m=2, covariance=X, steps=s).objective for s in (50, 100, 200, 400, 800)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_descent_curve_monotone(self):
        X = random_psd_instance(10, 2, 1)
        gamma = 0.1 / symmetric_eig(X).eigenvalues[0]
        w0 = 0.01 * np.random.default_rng(0).standard_normal((2, 10))
        _, curve = gradient_descent(X, w0, 400, gamma, record_every=10)
        assert len(curve) == 40
        # monotone up to roundoff once the objective has converged
        assert all(b <= a + 1e-14 * abs(a) for a, b in zip(curve, curve[1:]))

    def test_divergence_reports_step(self):
        X = random_psd_instance(6, 2, 0)
        with pytest.raises(NumericalDivergence, match="step"):
            gradient_descent(X, np.ones((2, 6)), 500, 50.0)

    def test_psd_instance(self):
        X = random_psd_instance(20, 4, 3)
        vals = symmetric_eig(X).eigenvalues
        assert np.allclose(X, X.T) and vals[-1] >= -1e-12
        assert vals[3] >= 2.0 - 1e-9 and vals[4] <= 1.0 + 1e-9
        assert linear_ssl_loss_expected(ssl_minimizer_oracle(X, 4), X) < 0
        with pytest.raises(ValueError):
            random_psd_instance(3, 4, 0)
