"""Estimator oracles: Gaussian elimination, IV ratios, exhaustive refits."""

import numpy as np
import pytest

import threshold_iv as tiv
from threshold_iv import (
    Dataset,
    build_grid,
    fit_first_stage_linear,
    fit_first_stage_threshold,
    gmm_full,
    gmm_step,
    ols_multi,
    partition,
    predicted_regressors,
    structural_residuals,
    tsls_full,
    tsls_split,
)
from threshold_iv.estimators import threshold_ssr_profile
from threshold_iv.exceptions import SingularDesign

from conftest import duplicated_regime_dataset, make_dataset


def gauss_solve(a, b):
    """Independent dense solver: Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    was_vector = b.ndim == 1
    if was_vector:
        b = b[:, None]
    n = a.shape[0]
    aug = np.hstack([a, b])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        aug[[col, piv]] = aug[[piv, col]]
        aug[col] = aug[col] / aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    out = aug[:, n:]
    return out.ravel() if was_vector else out


class TestOlsMulti:
    def test_noiseless_recovery(self, rng):
        z = rng.standard_normal((40, 3))
        b0 = rng.standard_normal((3, 2))
        assert np.allclose(ols_multi(z, z @ b0), b0, atol=1e-10)

    def test_single_column_identity(self, rng):
        z = rng.standard_normal((25, 1))
        assert np.allclose(ols_multi(z, z.copy()), 1.0)

    def test_matches_gaussian_elimination(self, rng):
        z = rng.standard_normal((12, 3))
        x = rng.standard_normal((12, 2))
        expected = gauss_solve(z.T @ z, z.T @ x)
        assert np.allclose(ols_multi(z, x), expected, rtol=1e-10)

    def test_duplicated_column_raises(self, rng):
        col = rng.standard_normal(20)
        z = np.column_stack([col, col, rng.standard_normal(20)])
        with pytest.raises(SingularDesign):
            ols_multi(z, rng.standard_normal(20))


class TestFirstStageLinear:
    def test_noiseless(self, rng):
        ds = make_dataset(T=40, u_scale=0.0, seed=1)
        fs = fit_first_stage_linear(ds)
        assert np.allclose(fs.xhat, ds.x, atol=1e-9)

    def test_simple_regression_formula(self, rng):
        # p1 = 1, z = intercept plus one instrument: slope = cov/var
        T = 35
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        x = 1.5 + 0.8 * zi + 0.3 * rng.standard_normal(T)
        ds = Dataset(y=rng.standard_normal(T), x=x[:, None], z1=z1, z=z,
                     q=rng.standard_normal(T))
        fs = fit_first_stage_linear(ds)
        zc = zi - zi.mean()
        slope = float(zc @ (x - x.mean()) / (zc @ zc))
        intercept = x.mean() - slope * zi.mean()
        assert np.allclose(fs.pi.ravel(), [intercept, slope], rtol=1e-10)


class TestFirstStageThreshold:
    def test_noiseless_break_recovery(self, rng):
        T = 60
        z1 = np.ones((T, 1))
        zi = rng.standard_normal(T)
        z = np.column_stack([z1, zi])
        q = rng.standard_normal(T)
        rho0 = float(np.quantile(q, 0.45, method="lower"))
        x = np.where(q <= rho0, 1.0 + 2.0 * zi, -1.0 + 0.5 * zi)
        ds = Dataset(y=rng.standard_normal(T), x=x[:, None], z1=z1, z=z, q=q)
        grid = build_grid(q, 0.15)
        fs = fit_first_stage_threshold(ds, grid)
        assert fs.rho == rho0
        assert fs.trace_ssr < 1e-16

    def test_split_never_beats_linear(self):
        ds = make_dataset(T=40, delta_pi=0.0, seed=5)
        grid = build_grid(ds.q, 0.15)
        fs_lin = fit_first_stage_linear(ds)
        lin_ssr = float(np.sum((ds.x - fs_lin.xhat) ** 2))
        fs_thr = fit_first_stage_threshold(ds, grid)
        assert fs_thr.trace_ssr <= lin_ssr + 1e-10

    def test_exhaustive_refit_oracle(self):
        ds = make_dataset(T=25, seed=9, delta_pi=0.6, rho0=0.2)
        grid = build_grid(ds.q, 0.15)
        n_min = ds.default_n_min()
        best = (np.inf, None)
        for rho in grid.values:
            lo = ds.q <= rho
            if min(lo.sum(), (~lo).sum()) < n_min:
                continue
            pi1 = gauss_solve(ds.z[lo].T @ ds.z[lo], ds.z[lo].T @ ds.x[lo])
            pi2 = gauss_solve(ds.z[~lo].T @ ds.z[~lo], ds.z[~lo].T @ ds.x[~lo])
            resid = ds.x - np.where(lo[:, None], ds.z @ pi1, ds.z @ pi2)
            ssr = float((resid**2).sum())
            if ssr < best[0] - 1e-12:
                best = (ssr, float(rho))
        fs = fit_first_stage_threshold(ds, grid)
        assert fs.rho == best[1]
        assert np.isclose(fs.trace_ssr, best[0], rtol=1e-8)

    def test_pure_function(self):
        ds = make_dataset(T=30, seed=2, delta_pi=0.5)
        grid = build_grid(ds.q, 0.15)
        a = fit_first_stage_threshold(ds, grid)
        b = fit_first_stage_threshold(ds, grid)
        assert a.rho == b.rho and np.array_equal(a.xhat, b.xhat)


class TestTsls:
    def test_noiseless_recovery(self, rng):
        T = 50
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        x = (1.0 + 0.9 * zi)[:, None]  # u = 0 so xhat = x
        theta0 = np.array([1.3, -0.4])
        y = np.column_stack([x, z1]) @ theta0
        ds = Dataset(y=y, x=x, z1=z1, z=z, q=rng.standard_normal(T))
        fit = tsls_full(ds, fit_first_stage_linear(ds))
        assert np.allclose(fit.theta, theta0, atol=1e-9)

    def test_just_identified_iv_ratio(self, rng):
        # scalar IV oracle after partialling out the intercept (demeaning)
        ds = make_dataset(T=45, p1=1, p2=1, qz=2, seed=4)
        fit = tsls_full(ds, fit_first_stage_linear(ds))
        zi = ds.z[:, 1]
        zc = zi - zi.mean()
        beta_iv = float(zc @ (ds.y - ds.y.mean())) / float(zc @ (ds.x[:, 0] - ds.x[:, 0].mean()))
        assert np.isclose(fit.theta[0], beta_iv, rtol=1e-10)

    def test_p1_zero_impossible(self, rng):
        with pytest.raises(ValueError, match="endogenous"):
            Dataset(y=np.zeros(10), x=np.empty((10, 0)),
                    z1=np.ones((10, 1)), z=np.ones((10, 1)),
                    q=rng.standard_normal(10))

    def test_split_identical_regimes(self):
        ds = duplicated_regime_dataset(T0=20, seed=6)
        fs = fit_first_stage_linear(ds)
        part = partition(ds.q, 0.5)
        split = tsls_split(ds, fs, part)
        full = tsls_full(ds, fs)
        assert np.allclose(split.theta_low, split.theta_high, atol=1e-12)
        assert np.allclose(split.theta_low, full.theta, atol=1e-10)

    def test_split_normal_equation_oracle(self):
        ds = make_dataset(T=30, seed=8)
        fs = fit_first_stage_linear(ds)
        part = partition(ds.q, float(np.median(ds.q)))
        split = tsls_split(ds, fs, part)
        what = predicted_regressors(ds, fs)
        lo = part.mask_low
        th_lo = gauss_solve(what[lo].T @ what[lo], what[lo].T @ ds.y[lo])
        th_hi = gauss_solve(what[~lo].T @ what[~lo], what[~lo].T @ ds.y[~lo])
        assert np.allclose(split.theta_low, th_lo, rtol=1e-9)
        assert np.allclose(split.theta_high, th_hi, rtol=1e-9)
        resid = ds.y - np.where(lo, what @ th_lo, what @ th_hi)
        assert np.allclose(split.residuals, resid, atol=1e-10)

    def test_structural_residuals_use_observed_w(self):
        ds = make_dataset(T=25, seed=3)
        fit = tsls_full(ds, fit_first_stage_linear(ds))
        eps = structural_residuals(ds, fit.theta)
        assert np.allclose(eps, ds.y - ds.w @ fit.theta)
        assert not np.allclose(eps, fit.residuals)  # w-hat vs observed w


class TestGmm:
    def test_just_identified_weight_free(self, rng):
        ds = make_dataset(T=40, p1=1, p2=1, qz=2, seed=7)
        part = partition(ds.q, float(np.median(ds.q)))
        w1 = np.eye(2)
        w2 = np.array([[2.0, 0.3], [0.3, 1.0]])
        a = gmm_step(ds, part, (w1, w1))
        b = gmm_step(ds, part, (w2, w2))
        assert np.allclose(a.theta_low, b.theta_low, rtol=1e-9)
        assert np.allclose(a.theta_high, b.theta_high, rtol=1e-9)
        fa = gmm_full(ds, w1)
        fb = gmm_full(ds, w2)
        assert np.allclose(fa.theta, fb.theta, rtol=1e-9)

    def test_noiseless_recovery(self, rng):
        T = 50
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        x = (1.0 + 0.9 * zi + 0.2 * rng.standard_normal(T))[:, None]
        theta0 = np.array([0.7, 0.2])
        y = np.column_stack([x, z1]) @ theta0  # eps = 0
        ds = Dataset(y=y, x=x, z1=z1, z=z, q=rng.standard_normal(T))
        part = partition(ds.q, float(np.median(ds.q)))
        fit = gmm_step(ds, part, (np.eye(2), np.eye(2)))
        assert np.allclose(fit.theta_low, theta0, atol=1e-8)
        assert np.allclose(fit.theta_high, theta0, atol=1e-8)

    def test_overidentified_formula_oracle(self, rng):
        # direct evaluation of the two-step estimator by an independent
        # inv-based pipeline
        ds = make_dataset(T=40, p1=1, p2=2, qz=4, seed=11)
        part = partition(ds.q, float(np.median(ds.q)))
        weight_lo = np.eye(4) + 0.1
        weight_hi = 2.0 * np.eye(4)
        fit = gmm_step(ds, part, (weight_lo, weight_hi))
        T = ds.T
        for mask, wmat, got in (
            (part.mask_low, weight_lo, fit.theta_low),
            (~part.mask_low, weight_hi, fit.theta_high),
        ):
            n = ds.w[mask].T @ ds.z[mask] / T
            szy = ds.z[mask].T @ ds.y[mask] / T
            wi = np.linalg.inv(wmat)
            expected = np.linalg.inv(n @ wi @ n.T) @ n @ wi @ szy
            assert np.allclose(got, expected, rtol=1e-8)


class TestEstimatorProperties:
    @pytest.mark.parametrize("seed", range(6))
    def test_split_ssr_dominance(self, seed):
        ds = make_dataset(T=36, seed=seed)
        grid = build_grid(ds.q, 0.2)
        profile = threshold_ssr_profile(ds, grid)
        pi = ols_multi(ds.z, ds.x)
        lin_ssr = float(np.sum((ds.x - ds.z @ pi) ** 2))
        assert np.nanmin(profile) <= lin_ssr + 1e-10

    def test_instrument_scale_equivariance(self):
        ds = make_dataset(T=40, seed=13, delta_pi=0.5)
        grid = build_grid(ds.q, 0.15)
        scaled = Dataset(y=ds.y, x=ds.x, z1=3.0 * ds.z1, z=3.0 * ds.z, q=ds.q)
        fs_a = fit_first_stage_threshold(ds, grid)
        fs_b = fit_first_stage_threshold(scaled, grid)
        assert fs_a.rho == fs_b.rho
        assert np.allclose(fs_a.xhat, fs_b.xhat, rtol=1e-9)

    def test_row_permutation_invariance(self, rng):
        ds = make_dataset(T=30, seed=14)
        fs = fit_first_stage_linear(ds)
        fit = tsls_full(ds, fs)
        perm = rng.permutation(30)
        ds_p = Dataset(y=ds.y[perm], x=ds.x[perm], z1=ds.z1[perm],
                       z=ds.z[perm], q=ds.q[perm])
        fit_p = tsls_full(ds_p, fit_first_stage_linear(ds_p))
        assert np.allclose(fit.theta, fit_p.theta, rtol=1e-10)
        assert np.allclose(fit.residuals[perm], fit_p.residuals, atol=1e-10)

    def test_rho_consistency_improves_with_T(self):
        # light version of the finite-sample rate check (full run in the
        # acceptance suite)
        from threshold_iv.montecarlo import DgpConfig, generate

        medians = {}
        for T in (100, 400):
            errs = []
            for rep in range(60):
                ds = generate(DgpConfig(T=T, delta_pi=1.0), (99, T, rep))
                grid = build_grid(ds.q, 0.15)
                fs = fit_first_stage_threshold(ds, grid)
                errs.append(abs(fs.rho - 1.75))
            medians[T] = float(np.median(errs))
        assert medians[400] < medians[100]
