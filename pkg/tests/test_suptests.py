"""Sequence statistics: invariances, collapses, and per-candidate refit oracles."""

import numpy as np
import pytest

from threshold_iv import (
    Dataset,
    ResidualSource,
    VarianceMode,
    build_grid,
    first_stage_linearity_tests,
    fit_first_stage_linear,
    fit_first_stage_threshold,
    gmm_step,
    gmm_wald_variance,
    lr_sequence,
    moment_blocks,
    partition,
    tsls_full,
    tsls_sequences,
    tsls_split,
    tsls_variance_lfs,
    tsls_variance_tfs,
    w_sequence,
    wg_sequence,
)
from threshold_iv.estimators import gmm_null_fits, predicted_regressors
from threshold_iv.exceptions import AllCandidatesFailed

from conftest import duplicated_regime_dataset, make_dataset


def scale_y(ds, c):
    return Dataset(y=c * ds.y, x=ds.x, z1=ds.z1, z=ds.z, q=ds.q)


def scale_z(ds, c):
    return Dataset(y=ds.y, x=ds.x, z1=c * ds.z1, z=c * ds.z, q=ds.q)


def all_sequences(ds, grid):
    fs = fit_first_stage_linear(ds)
    lr_res, w_res = tsls_sequences(ds, grid, fs)
    return {
        "gmm-ch": wg_sequence(ds, grid, ResidualSource.per_gamma()),
        "gmm-br": wg_sequence(ds, grid, ResidualSource.full_sample_null()),
        "lr": lr_res,
        "wald": w_res,
    }


class TestInvariances:
    @pytest.mark.parametrize("transform,c", [(scale_y, 2.0), (scale_z, 3.0)])
    def test_sequences_invariant(self, transform, c):
        ds = make_dataset(T=50, seed=21)
        grid = build_grid(ds.q, 0.15)
        base = all_sequences(ds, grid)
        scaled = all_sequences(transform(ds, c), grid)
        for kind in base:
            a, b = base[kind], scaled[kind]
            assert np.allclose(a.values, b.values, rtol=1e-8), kind
            assert a.argmax_gamma == b.argmax_gamma

    def test_sup_and_argmax_consistent(self):
        ds = make_dataset(T=45, seed=22)
        grid = build_grid(ds.q, 0.15)
        for res in all_sequences(ds, grid).values():
            assert res.sup == res.values.max()
            assert res.argmax_gamma == res.grid.values[int(np.argmax(res.values))]

    def test_lr_nonnegative_random(self):
        for seed in range(5):
            ds = make_dataset(T=40, seed=seed)
            grid = build_grid(ds.q, 0.2)
            res = lr_sequence(ds, grid, fit_first_stage_linear(ds))
            assert (res.values >= 0.0).all()


class TestDegenerateCases:
    def test_duplicated_regimes_zero_statistic(self):
        ds = duplicated_regime_dataset(T0=22, seed=23)
        grid = build_grid(ds.q, 0.0)
        fs = fit_first_stage_linear(ds)
        lr_res, w_res = tsls_sequences(ds, grid, fs, n_min=ds.p + 1)
        idx = int(np.where(lr_res.grid.values == 0.0)[0][0])
        assert lr_res.values[idx] <= 1e-8
        assert w_res.values[idx] <= 1e-8
        wg = wg_sequence(ds, grid, ResidualSource.full_sample_null(), n_min=ds.p + 1)
        idx = int(np.where(wg.grid.values == 0.0)[0][0])
        assert wg.values[idx] <= 1e-8


class TestResidualInjection:
    def test_ch_equals_br_with_forced_residuals(self):
        ds = make_dataset(T=45, seed=24)
        grid = build_grid(ds.q, 0.15)
        fit1, _ = gmm_null_fits(ds)
        forced_ch = wg_sequence(
            ds, grid, ResidualSource.per_gamma(), h_resid_override=fit1.residuals
        )
        br = wg_sequence(ds, grid, ResidualSource.full_sample_null())
        assert np.allclose(forced_ch.values, br.values, rtol=1e-10)


class TestJustIdentified:
    def test_two_step_equals_one_step(self):
        # just-identified design: the weight drops out of the estimator
        ds = make_dataset(T=60, p1=1, p2=1, qz=2, seed=25)
        grid = build_grid(ds.q, 0.15)
        for variant in (ResidualSource.per_gamma(), ResidualSource.full_sample_null()):
            two = wg_sequence(ds, grid, variant, two_step=True)
            one = wg_sequence(ds, grid, variant, two_step=False)
            assert np.allclose(two.values, one.values, rtol=1e-8)


class TestTfsCollapse:
    def test_tfs_equals_lfs_with_equal_slopes(self):
        rng = np.random.default_rng(26)
        T = 50
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        x = (0.4 + 1.1 * zi)[:, None]  # noiseless: pi1 == pi2 exactly
        y = x[:, 0] * 0.8 + 0.3 + rng.standard_normal(T)
        ds = Dataset(y=y, x=x, z1=z1, z=z, q=rng.standard_normal(T))
        grid = build_grid(ds.q, 0.2)
        fs_thr = fit_first_stage_threshold(ds, grid)
        fs_lin = fit_first_stage_linear(ds)
        lr_t, w_t = tsls_sequences(ds, grid, fs_thr)
        lr_l, w_l = tsls_sequences(ds, grid, fs_lin)
        assert np.allclose(lr_t.values, lr_l.values, rtol=1e-8)
        assert np.allclose(w_t.values, w_l.values, rtol=1e-7)


class TestArgmaxIdentity:
    def test_lr_argmax_is_ssr_argmin(self):
        ds = make_dataset(T=48, seed=27, delta_theta=0.5, gamma0=0.1)
        grid = build_grid(ds.q, 0.15)
        fs = fit_first_stage_linear(ds)
        res = lr_sequence(ds, grid, fs)
        ssr = []
        for gamma in res.grid.values:
            split = tsls_split(ds, fs, partition(ds.q, float(gamma)))
            ssr.append(float(split.residuals @ split.residuals))
        assert res.argmax_gamma == res.grid.values[int(np.argmin(ssr))]


class TestPerCandidateRefitAgreement:
    """Prefix-sum sequence kernels must match independent per-candidate refits."""

    def test_wg_sequences(self):
        ds = make_dataset(T=42, seed=28)
        grid = build_grid(ds.q, 0.15)
        fit1, _ = gmm_null_fits(ds)
        br = wg_sequence(ds, grid, ResidualSource.full_sample_null())
        ch = wg_sequence(ds, grid, ResidualSource.per_gamma())
        for res, per_gamma in ((br, False), (ch, True)):
            for idx, gamma in enumerate(res.grid.values):
                part = partition(ds.q, float(gamma))
                if per_gamma:
                    m_lo = ds.z[part.mask_low].T @ ds.z[part.mask_low] / ds.T
                    m_hi = ds.z[~part.mask_low].T @ ds.z[~part.mask_low] / ds.T
                    step1 = gmm_step(ds, part, (m_lo, m_hi))
                    resid = step1.residuals
                else:
                    resid = fit1.residuals
                blocks = moment_blocks(ds, part, resid)
                split2 = gmm_step(ds, part, (blocks.h_eps_low, blocks.h_eps_high))
                v = gmm_wald_variance(blocks)
                d = split2.theta_low - split2.theta_high
                wald = ds.T * d @ np.linalg.solve(v, d)
                assert np.isclose(res.values[idx], wald, rtol=1e-8)

    def test_tsls_sequences_lfs_and_tfs(self):
        ds = make_dataset(T=44, seed=29, delta_pi=0.8, rho0=0.2)
        grid = build_grid(ds.q, 0.15)
        for fs in (fit_first_stage_linear(ds), fit_first_stage_threshold(ds, grid)):
            lr_res, w_res = tsls_sequences(ds, grid, fs)
            full = tsls_full(ds, fs)
            ssr0 = float(full.residuals @ full.residuals)
            dof = ds.T - 2 * ds.p
            for idx, gamma in enumerate(lr_res.grid.values):
                part = partition(ds.q, float(gamma))
                split = tsls_split(ds, fs, part)
                ssr1 = float(split.residuals @ split.residuals)
                lr_manual = (ssr0 - ssr1) / (ssr1 / dof)
                assert np.isclose(lr_res.values[idx], lr_manual, rtol=1e-8)
                if fs.kind == "linear":
                    v = tsls_variance_lfs(ds, fs, part, full.theta)
                else:
                    v = tsls_variance_tfs(ds, fs, part, full.theta)
                d = split.theta_low - split.theta_high
                w_manual = ds.T * d @ np.linalg.solve(v, d)
                assert np.isclose(w_res.values[idx], w_manual, rtol=1e-8)


class TestSkippedCandidates:
    def test_extreme_candidates_listed_not_dropped(self):
        ds = make_dataset(T=24, seed=30)
        grid = build_grid(ds.q, 0.0)  # untrimmed: edge candidates break n_min
        res = wg_sequence(ds, grid, ResidualSource.full_sample_null())
        assert res.skipped, "expected edge candidates to be skipped"
        assert len(res.grid) + len(res.skipped) == len(grid)
        assert all(s.reason == "regime too small" for s in res.skipped[:1])
        assert np.isfinite(res.values).all()

    def test_all_candidates_failed(self):
        ds = make_dataset(T=24, seed=31)
        grid = build_grid(ds.q, 0.0)
        with pytest.raises(AllCandidatesFailed):
            wg_sequence(ds, grid, ResidualSource.full_sample_null(), n_min=ds.T)


class TestFirstStageLinearity:
    def test_noiseless_linear_first_stage(self):
        rng = np.random.default_rng(32)
        T = 40
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        x = (1.0 + 2.0 * zi)[:, None]
        ds = Dataset(y=rng.standard_normal(T), x=x, z1=z1, z=z,
                     q=rng.standard_normal(T))
        grid = build_grid(ds.q, 0.2)
        lr_res, w_res = first_stage_linearity_tests(ds, grid)
        assert np.allclose(lr_res.values, 0.0, atol=1e-8)
        assert np.allclose(w_res.values, 0.0, atol=1e-6)

    def test_noiseless_threshold_first_stage(self):
        rng = np.random.default_rng(33)
        T = 50
        zi = rng.standard_normal(T)
        z1 = np.ones((T, 1))
        z = np.column_stack([z1, zi])
        q = rng.standard_normal(T)
        rho0 = float(np.quantile(q, 0.5, method="lower"))
        x = np.where(q <= rho0, 1.0 + 2.0 * zi, -0.5 + 0.7 * zi)[:, None]
        ds = Dataset(y=rng.standard_normal(T), x=x, z1=z1, z=z, q=q)
        grid = build_grid(q, 0.2)
        lr_res, _ = first_stage_linearity_tests(ds, grid)
        assert lr_res.argmax_gamma == rho0
        assert lr_res.sup == np.inf  # SSR1 vanishes at the true break

    def test_matches_ols_rederivation(self):
        # scalar x: LR and W recomputed from scratch on the OLS path
        ds = make_dataset(T=36, p1=1, p2=2, qz=3, seed=34, delta_pi=0.5)
        grid = build_grid(ds.q, 0.15)
        lr_res, w_res = first_stage_linearity_tests(ds, grid)
        x = ds.x[:, 0]
        pi_full = np.linalg.solve(ds.z.T @ ds.z, ds.z.T @ x)
        u0 = x - ds.z @ pi_full
        ssr0 = float(u0 @ u0)
        dof = ds.T - 2 * ds.qz
        for idx, gamma in enumerate(lr_res.grid.values):
            lo = ds.q <= gamma
            p1c = np.linalg.solve(ds.z[lo].T @ ds.z[lo], ds.z[lo].T @ x[lo])
            p2c = np.linalg.solve(ds.z[~lo].T @ ds.z[~lo], ds.z[~lo].T @ x[~lo])
            resid = np.where(lo, x - ds.z @ p1c, x - ds.z @ p2c)
            ssr1 = float(resid @ resid)
            assert np.isclose(lr_res.values[idx], (ssr0 - ssr1) / (ssr1 / dof), rtol=1e-8)
            m1i = np.linalg.inv(ds.z[lo].T @ ds.z[lo])
            m2i = np.linalg.inv(ds.z[~lo].T @ ds.z[~lo])
            h1 = (ds.z[lo] * u0[lo, None] ** 2).T @ ds.z[lo]
            h2 = (ds.z[~lo] * u0[~lo, None] ** 2).T @ ds.z[~lo]
            v = m1i @ h1 @ m1i + m2i @ h2 @ m2i
            d = p1c - p2c
            assert np.isclose(w_res.values[idx], d @ np.linalg.solve(v, d), rtol=1e-8)
