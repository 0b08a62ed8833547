"""Bootstrap drivers: multiplier moments, conventions, determinism, replay."""

import math

import numpy as np
import pytest

import threshold_iv.bootstrap as bt
from threshold_iv import (
    Multiplier,
    ResidualSource,
    VarianceMode,
    bootstrap_2sls,
    bootstrap_2sls_both,
    bootstrap_ch,
    bootstrap_first_stage,
    bootstrap_gmm_br,
    build_grid,
    draw_multipliers,
    fit_first_stage_linear,
    fit_first_stage_threshold,
    gmm_step,
    gmm_wald_variance,
    moment_blocks,
    partition,
    structural_residuals,
    summarize,
    tsls_full,
    tsls_split,
    tsls_variance_lfs,
    wg_sequence,
)
from threshold_iv.estimators import gmm_null_fits, ols_multi
from threshold_iv.montecarlo import DgpConfig, generate

from conftest import make_dataset


class TestMultipliers:
    def test_mammen_moments(self):
        rng = np.random.default_rng(0)
        draws = draw_multipliers(Multiplier.mammen(), 10**6, rng)
        assert abs(draws.mean()) < 0.005
        assert 0.99 < draws.var() < 1.01
        assert set(np.round(np.unique(draws), 12)) == {
            round(bt.MAMMEN_LOW, 12), round(bt.MAMMEN_HIGH, 12)
        }

    def test_mammen_third_moment(self):
        rng = np.random.default_rng(1)
        draws = draw_multipliers(Multiplier.mammen(), 10**6, rng)
        assert abs((draws**3).mean() - 1.0) < 0.01

    def test_rademacher_support(self):
        rng = np.random.default_rng(2)
        draws = draw_multipliers(Multiplier.rademacher(), 10000, rng)
        assert set(np.unique(draws)) == {-1.0, 1.0}
        assert abs(draws.mean()) < 0.05

    def test_normal_reproducible(self):
        a = draw_multipliers(Multiplier.normal(), 50, np.random.default_rng(3))
        b = draw_multipliers(Multiplier.normal(), 50, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_iid_scaled(self):
        rng = np.random.default_rng(4)
        draws = draw_multipliers(Multiplier.iid_gaussian(sigma2=4.0), 10**5, rng)
        assert 3.9 < draws.var() < 4.1


class TestSummarize:
    def test_four_point_enumeration(self):
        # stated convention: CV = draws_(ceil((1-alpha)B)) ascending; here the
        # 3rd order statistic; p counts draws >= observed
        res = summarize(np.array([1.0, 2.0, 3.0, 4.0]), observed=3.5, alpha=0.25)
        assert res.critical_value == 3.0
        assert res.p_value == 0.25
        assert res.reject  # consistent with p <= alpha

    def test_observed_above_all(self):
        res = summarize(np.array([1.0, 2.0, 3.0]), observed=9.0, alpha=0.05)
        assert res.p_value == 0.0 and res.reject

    def test_observed_at_minimum(self):
        res = summarize(np.array([1.0, 2.0, 3.0]), observed=1.0, alpha=0.05)
        assert res.p_value == 1.0 and not res.reject

    def test_p_value_monotone_in_observed(self, rng):
        draws = rng.standard_normal(200) ** 2
        ps = [summarize(draws, obs, 0.05).p_value for obs in (0.1, 0.5, 2.0, 5.0)]
        assert all(a >= b for a, b in zip(ps, ps[1:]))

    def test_nominal_quantile_convention(self):
        draws = np.arange(1.0, 101.0)
        res = summarize(draws, observed=50.0, alpha=0.05)
        assert res.critical_value == 95.0


@pytest.fixture
def small_problem():
    ds = generate(DgpConfig(T=80, error_case="b"), 17)
    grid = build_grid(ds.q, 0.15)
    return ds, grid


class TestDeterminism:
    def test_same_seed_bit_identical(self, small_problem):
        ds, grid = small_problem
        for runner in (bootstrap_gmm_br, bootstrap_ch):
            a = runner(ds, grid, B=25, mult=Multiplier.normal(), seed=11, n_workers=1)
            b = runner(ds, grid, B=25, mult=Multiplier.normal(), seed=11, n_workers=1)
            assert np.array_equal(a.draws, b.draws)
            assert a.critical_value == b.critical_value

    def test_parallel_degree_invariance(self, small_problem):
        ds, grid = small_problem
        serial = bootstrap_gmm_br(ds, grid, B=24, mult=Multiplier.normal(), seed=3, n_workers=1)
        pooled = bootstrap_gmm_br(ds, grid, B=24, mult=Multiplier.normal(), seed=3, n_workers=2)
        assert np.array_equal(serial.draws, pooled.draws)
        fs = fit_first_stage_linear(ds)
        s_lr, s_w = bootstrap_2sls_both(ds, grid, fs, B=24, mult=Multiplier.normal(), seed=3, n_workers=1)
        p_lr, p_w = bootstrap_2sls_both(ds, grid, fs, B=24, mult=Multiplier.normal(), seed=3, n_workers=2)
        assert np.array_equal(s_lr.draws, p_lr.draws)
        assert np.array_equal(s_w.draws, p_w.draws)

    def test_fixed_regressors_untouched(self, small_problem):
        ds, grid = small_problem
        z0, q0, z10, x0 = ds.z.copy(), ds.q.copy(), ds.z1.copy(), ds.x.copy()
        bootstrap_gmm_br(ds, grid, B=10, mult=Multiplier.normal(), seed=1, n_workers=1)
        fs = fit_first_stage_linear(ds)
        bootstrap_2sls_both(ds, grid, fs, B=10, mult=Multiplier.normal(), seed=1, n_workers=1)
        assert np.array_equal(ds.z, z0) and np.array_equal(ds.q, q0)
        assert np.array_equal(ds.z1, z10) and np.array_equal(ds.x, x0)


class TestInstrumentation:
    def test_single_multiplier_vector_couples_2sls_replicate(self, small_problem, monkeypatch):
        # one weight draw per replicate multiplies both residual sets
        ds, grid = small_problem
        fs = fit_first_stage_linear(ds)
        calls = []
        orig = bt.draw_multipliers

        def spy(mult, size, rng):
            calls.append(size)
            return orig(mult, size, rng)

        monkeypatch.setattr(bt, "draw_multipliers", spy)
        bootstrap_2sls_both(ds, grid, fs, B=7, mult=Multiplier.normal(), seed=5, n_workers=1)
        assert calls == [ds.T] * 7

    def test_pergamma_scheme_draws_grid_times_more(self, small_problem, monkeypatch):
        ds, grid = small_problem
        counts = {"n": 0}
        orig = bt.draw_multipliers

        def spy(mult, size, rng):
            counts["n"] += int(np.prod(size))
            return orig(mult, size, rng)

        monkeypatch.setattr(bt, "draw_multipliers", spy)
        B = 5
        bootstrap_ch(ds, grid, B=B, mult=Multiplier.normal(), seed=5, n_workers=1)
        ch_draws = counts["n"]
        counts["n"] = 0
        bootstrap_gmm_br(ds, grid, B=B, mult=Multiplier.normal(), seed=5, n_workers=1)
        br_draws = counts["n"]
        assert ch_draws == len(grid) * br_draws

    def test_zero_multiplier_injection_finite(self, small_problem, monkeypatch):
        ds, grid = small_problem
        monkeypatch.setattr(bt, "draw_multipliers", lambda m, size, rng: np.zeros(size))
        res = bootstrap_ch(ds, grid, B=4, mult=Multiplier.normal(), seed=2, n_workers=1)
        assert np.isfinite(res.draws).all()
        assert np.array_equal(res.draws, np.zeros(4))

    def test_unit_multiplier_reproduces_observed_2sls(self, small_problem, monkeypatch):
        # eta = 1 rebuilds the original sample exactly
        ds, grid = small_problem
        fs = fit_first_stage_linear(ds)
        monkeypatch.setattr(bt, "draw_multipliers", lambda m, size, rng: np.ones(size))
        lr_res, w_res = bootstrap_2sls_both(ds, grid, fs, B=3, mult=Multiplier.normal(), seed=2, n_workers=1)
        assert np.allclose(lr_res.draws, lr_res.observed, rtol=1e-9)
        assert np.allclose(w_res.draws, w_res.observed, rtol=1e-9)


class TestReplayOracles:
    def test_gmm_null_bootstrap_replay(self):
        # hand-driven three-pass recomputation through the module-level API;
        # multipliers attach to the q-sorted sample, so the replay reorders
        # each draw back to the original row layout
        from threshold_iv._kernels import prepare

        ds = generate(DgpConfig(T=40, error_case="b"), 23)
        grid = build_grid(ds.q, 0.15)
        B = 3
        res = bootstrap_gmm_br(ds, grid, B=B, mult=Multiplier.normal(), seed=9, n_workers=1)
        _, fit2 = gmm_null_fits(ds)
        m_hat = ds.z.T @ ds.z / ds.T
        n_min = ds.default_n_min()
        prep = prepare(ds, grid)
        expected = []
        for b in range(B):
            rng = bt._rng_for(9, b)
            eta = prep.unsort(rng.standard_normal(ds.T))
            y_b = fit2.residuals * eta
            ds_b = type(ds)(y=y_b, x=ds.x, z1=ds.z1, z=ds.z, q=ds.q)
            theta_b = np.linalg.solve(
                (ds.w.T @ ds.z / ds.T) @ np.linalg.solve(m_hat, ds.z.T @ ds.w / ds.T),
                (ds.w.T @ ds.z / ds.T) @ np.linalg.solve(m_hat, ds.z.T @ y_b / ds.T),
            )
            r_b = y_b - ds.w @ theta_b
            vals = []
            for gamma in grid.values:
                lo = ds.q <= gamma
                if min(lo.sum(), (~lo).sum()) < n_min:
                    continue
                part = partition(ds.q, float(gamma))
                blocks = moment_blocks(ds_b, part, r_b)
                split2 = gmm_step(ds_b, part, (blocks.h_eps_low, blocks.h_eps_high))
                v = gmm_wald_variance(blocks)
                d = split2.theta_low - split2.theta_high
                vals.append(ds.T * d @ np.linalg.solve(v, d))
            expected.append(max(vals))
        assert np.allclose(np.sort(expected), res.draws, rtol=1e-8)

    def test_tsls_bootstrap_replay(self):
        # scripted five-replicate replay with logged multipliers
        from threshold_iv._kernels import prepare

        ds = generate(DgpConfig(T=25, error_case="b"), 29)
        grid = build_grid(ds.q, 0.2)
        fs = fit_first_stage_linear(ds)
        B = 5
        lr_res, w_res = bootstrap_2sls_both(
            ds, grid, fs, B=B, mult=Multiplier.rademacher(), seed=13, n_workers=1
        )
        theta = tsls_full(ds, fs).theta
        eps = structural_residuals(ds, theta)
        uhat = ds.x - fs.xhat
        n_min = ds.default_n_min()
        prep = prepare(ds, grid)
        exp_lr, exp_w = [], []
        for b in range(B):
            rng = bt._rng_for(13, b)
            eta = prep.unsort(draw_multipliers(Multiplier.rademacher(), ds.T, rng))
            x_b = fs.xhat + uhat * eta[:, None]
            w_b = np.hstack([x_b, ds.z1])
            y_b = w_b @ theta + eps * eta
            ds_b = type(ds)(y=y_b, x=x_b, z1=ds.z1, z=ds.z, q=ds.q)
            fs_b = fit_first_stage_linear(ds_b)
            full_b = tsls_full(ds_b, fs_b)
            ssr0 = float(full_b.residuals @ full_b.residuals)
            dof = ds.T - 2 * ds.p
            vals_lr, vals_w = [], []
            for gamma in grid.values:
                lo = ds.q <= gamma
                if min(lo.sum(), (~lo).sum()) < n_min:
                    continue
                part = partition(ds.q, float(gamma))
                split = tsls_split(ds_b, fs_b, part)
                ssr1 = float(split.residuals @ split.residuals)
                vals_lr.append((ssr0 - ssr1) / (ssr1 / dof))
                v = tsls_variance_lfs(ds_b, fs_b, part, full_b.theta)
                d = split.theta_low - split.theta_high
                vals_w.append(ds.T * d @ np.linalg.solve(v, d))
            exp_lr.append(max(vals_lr))
            exp_w.append(max(vals_w))
        assert np.allclose(np.sort(exp_lr), lr_res.draws, rtol=1e-8)
        assert np.allclose(np.sort(exp_w), w_res.draws, rtol=1e-8)


class TestTfsBootstrapPath:
    def test_rho_reestimated_per_replicate(self):
        ds = generate(DgpConfig(T=120, delta_pi=1.0, error_case="b"), 31)
        grid = build_grid(ds.q, 0.15)
        fs = fit_first_stage_threshold(ds, grid)
        lr_res, w_res = bootstrap_2sls_both(
            ds, grid, fs, B=15, mult=Multiplier.normal(), seed=21, n_workers=1
        )
        assert lr_res.B == 15 and w_res.B == 15
        assert np.isfinite(lr_res.draws).all()
        assert np.isfinite(w_res.draws).all()

    def test_single_kind_wrapper(self, small_problem):
        ds, grid = small_problem
        fs = fit_first_stage_linear(ds)
        lr_only = bootstrap_2sls(ds, grid, fs, B=8, mult=Multiplier.normal(),
                                 kind="lr", seed=2, n_workers=1)
        both_lr, _ = bootstrap_2sls_both(ds, grid, fs, B=8, mult=Multiplier.normal(),
                                         seed=2, n_workers=1)
        assert np.array_equal(lr_only.draws, both_lr.draws)


class TestFirstStagePretestBootstrap:
    def test_runs_and_is_deterministic(self, small_problem):
        ds, grid = small_problem
        a = bootstrap_first_stage(ds, grid, B=12, mult=Multiplier.normal(), seed=4)
        b = bootstrap_first_stage(ds, grid, B=12, mult=Multiplier.normal(), seed=4)
        assert np.array_equal(a[0].draws, b[0].draws)
        assert np.array_equal(a[1].draws, b[1].draws)
        assert 0.0 <= a[0].p_value <= 1.0

    def test_detects_strong_first_stage_break(self):
        ds = generate(DgpConfig(T=250, delta_pi=1.0, error_case="b"), 37)
        grid = build_grid(ds.q, 0.15)
        lr_res, _ = bootstrap_first_stage(ds, grid, B=99, mult=Multiplier.normal(), seed=4)
        assert lr_res.reject
