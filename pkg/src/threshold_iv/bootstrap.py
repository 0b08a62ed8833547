"""Wild fixed-regressor bootstraps for the sup tests.

Three schemes: per-candidate pseudo-data with split residuals (the original
scheme), null pseudo-data with full-sample residuals (the corrected scheme),
and the 2SLS bootstrap that rebuilds the endogenous regressors through the
first stage. Regressors, instruments and the threshold variable are never
resampled. A known-homoskedasticity variant draws i.i.d. Gaussian residuals
instead of multiplying by wild weights.

Multiplier vectors attach to the sample sorted by the threshold variable, so
for a fixed seed the draws are invariant to the input row order; replicate
seeds derive from the replicate index, so any parallel chunking merges to
identical results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing as mp

import numpy as np

from . import _kernels
from ._kernels import OK, prepare
from .covariance import ResidualSource, VarianceMode
from .data import Dataset, ThresholdGrid
from .estimators import (
    LINEAR,
    THRESHOLD,
    FirstStageSpec,
    FullFit,
    gmm_null_fits,
    predicted_regressors,
    structural_residuals,
    tsls_full,
)
from .exceptions import BootstrapUnstable, ConfigError
from .suptests import (
    SequenceResult,
    first_stage_linearity_tests,
    tsls_sequences,
    wg_sequence,
)

NORMAL = "normal"
RADEMACHER = "rademacher"
MAMMEN = "mammen"
IID_GAUSSIAN = "iid"

_SQRT5 = math.sqrt(5.0)
MAMMEN_LOW = -(_SQRT5 - 1.0) / 2.0
MAMMEN_HIGH = (_SQRT5 + 1.0) / 2.0
MAMMEN_P_LOW = (_SQRT5 + 1.0) / (2.0 * _SQRT5)

# a run is invalidated when more than this share of replicates fails
MAX_FAILED_SHARE = 0.01


@dataclass(frozen=True)
class Multiplier:
    """Bootstrap weight distribution; the iid kind draws residuals directly."""

    kind: str = NORMAL
    sigma2: float | None = None
    sigma_v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (NORMAL, RADEMACHER, MAMMEN, IID_GAUSSIAN):
            raise ConfigError(f"unknown multiplier kind {self.kind!r}")

    @classmethod
    def normal(cls) -> "Multiplier":
        return cls(NORMAL)

    @classmethod
    def rademacher(cls) -> "Multiplier":
        return cls(RADEMACHER)

    @classmethod
    def mammen(cls) -> "Multiplier":
        return cls(MAMMEN)

    @classmethod
    def iid_gaussian(cls, sigma2=None, sigma_v=None) -> "Multiplier":
        return cls(IID_GAUSSIAN, sigma2=sigma2, sigma_v=sigma_v)

    @property
    def is_iid(self) -> bool:
        return self.kind == IID_GAUSSIAN


def draw_multipliers(mult: Multiplier, size, rng: np.random.Generator) -> np.ndarray:
    """Draw bootstrap weights (or, for the iid kind, residuals) of given size."""
    if mult.kind == NORMAL:
        return rng.standard_normal(size)
    if mult.kind == RADEMACHER:
        return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
    if mult.kind == MAMMEN:
        return np.where(rng.random(size) < MAMMEN_P_LOW, MAMMEN_LOW, MAMMEN_HIGH)
    if mult.sigma2 is None:
        raise ConfigError("iid multiplier needs sigma2 for scalar residual draws")
    return rng.standard_normal(size) * math.sqrt(mult.sigma2)


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap draws plus the derived decision quantities.

    critical_value is the ceil((1-alpha)*B)-th order statistic of the draws;
    p_value counts draws at or above the observed statistic.
    """

    draws: np.ndarray
    observed: float
    critical_value: float
    p_value: float
    reject: bool
    B: int
    alpha: float
    seed: int | None = None
    n_failed: int = 0
    sequence: SequenceResult | None = field(default=None, repr=False)


def summarize(
    draws: np.ndarray,
    observed: float,
    alpha: float,
    seed: int | None = None,
    sequence: SequenceResult | None = None,
    n_failed: int = 0,
) -> BootstrapResult:
    """Turn sup-statistic draws into a critical value, p-value and decision."""
    draws = np.sort(np.asarray(draws, dtype=np.float64))
    B = draws.shape[0]
    if B < 1:
        raise ConfigError("need at least one bootstrap draw")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    k = max(1, math.ceil((1.0 - alpha) * B - 1e-12))
    critical_value = float(draws[k - 1])
    p_value = float(np.count_nonzero(draws >= observed)) / B
    return BootstrapResult(
        draws=draws,
        observed=float(observed),
        critical_value=critical_value,
        p_value=p_value,
        reject=bool(observed > critical_value),
        B=B,
        alpha=float(alpha),
        seed=seed,
        n_failed=n_failed,
        sequence=sequence,
    )


def default_workers() -> int:
    env = os.environ.get("THRESHOLD_IV_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed),) + key)))


def _chunk_runner(args):
    fn, payload, indices = args
    return [fn(payload, b) for b in indices]


def _map_replicates(fn, payload, B: int, n_workers: int | None):
    """Run fn(payload, b) for b in range(B), deterministically mergeable.

    Replicate seeds derive from the replicate index, so any chunking across
    workers returns identical draws.
    """
    workers = default_workers() if n_workers is None else max(1, n_workers)
    if workers <= 1 or B < 2 * workers:
        return [fn(payload, b) for b in range(B)]
    chunks = np.array_split(np.arange(B), workers)
    ctx = mp.get_context("fork")
    out: list = [None] * B
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        for chunk, res in zip(
            chunks, pool.map(_chunk_runner, [(fn, payload, list(c)) for c in chunks])
        ):
            for b, val in zip(chunk, res):
                out[int(b)] = val
    return out


def _collect(raw, B_requested: int):
    draws = np.asarray(raw, dtype=np.float64)
    failed = int(np.count_nonzero(~np.isfinite(draws)))
    if failed > MAX_FAILED_SHARE * B_requested:
        raise BootstrapUnstable(
            f"{failed} of {B_requested} bootstrap replicates failed estimation"
        )
    return draws[np.isfinite(draws)], failed


def _sup_of(vals, status) -> float:
    ok = (status == OK) & np.isfinite(vals)
    if not ok.any():
        return float("nan")
    return float(vals[ok].max())


def _iid_sigma2_gmm(ds: Dataset) -> float:
    """Residual variance from the full-sample estimator under the null
    (2SLS and first-step GMM coincide), for the iid Gaussian scheme."""
    fit1, _ = gmm_null_fits(ds, homoskedastic=True)
    r = fit1.residuals
    return float(r @ r) / ds.T


# ---------------------------------------------------------------------------
# corrected GMM bootstrap: one null pseudo-sample per replicate
# ---------------------------------------------------------------------------


def _rep_gmm_null(payload, b: int) -> float:
    (prep, mult, homosked, seed, eps2, l_full, stat_pergamma) = payload
    rng = _rng_for(seed, b)
    if mult.is_iid:
        y_b = draw_multipliers(mult, prep.T, rng)
    else:
        y_b = eps2 * draw_multipliers(mult, prep.T, rng)
    if stat_pergamma:
        vals, status = _kernels.gmm_pergamma_stats(
            prep, y_b[None, :], homosked, two_step=True
        )
    else:
        theta_b = l_full @ (prep.z.T @ y_b)
        r_b = y_b - prep.w @ theta_b
        vals, status = _kernels.gmm_fixed_resid_stats(prep, y_b, r_b, homosked, True)
    return _sup_of(vals, status)


def _gmm_null_bootstrap(
    ds, grid, B, mult, mode, seed, alpha, n_min, n_workers, stat_pergamma
):
    homosked = not mode.is_robust
    variant = ResidualSource.per_gamma() if stat_pergamma else ResidualSource.full_sample_null()
    observed = wg_sequence(ds, grid, variant=variant, mode=mode, n_min=n_min)
    prep = prepare(ds, grid, n_min=n_min)

    _, fit2 = gmm_null_fits(ds, homoskedastic=homosked)
    eps2 = prep.sort(fit2.residuals)
    if mult.is_iid and mult.sigma2 is None:
        mult = replace(mult, sigma2=_iid_sigma2_gmm(ds))

    l_full = None
    if not stat_pergamma:
        p = ds.p
        n_tot = prep.nwz_tot
        m_tot = prep.mzz_tot
        nm = np.linalg.solve(m_tot, n_tot.T).T  # N M^{-1}
        l_full = np.linalg.solve(nm @ n_tot.T, nm)
    payload = (prep, mult, homosked, seed, eps2, l_full, stat_pergamma)
    raw = _map_replicates(_rep_gmm_null, payload, B, n_workers)
    draws, failed = _collect(raw, B)
    return summarize(draws, observed.sup, alpha, seed=seed, sequence=observed, n_failed=failed)


def bootstrap_gmm_br(
    ds: Dataset,
    grid: ThresholdGrid,
    B: int,
    mult: Multiplier,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
) -> BootstrapResult:
    """Corrected GMM bootstrap: one null pseudo-sample reused for every
    candidate, full-sample residuals inside the robust weight."""
    return _gmm_null_bootstrap(
        ds, grid, B, mult, mode, seed, alpha, n_min, n_workers, stat_pergamma=False
    )


def bootstrap_gmm_mix(
    ds: Dataset,
    grid: ThresholdGrid,
    B: int,
    mult: Multiplier,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
) -> BootstrapResult:
    """Null pseudo-data combined with the original split-residual weight:
    the intermediate column of the size tables."""
    return _gmm_null_bootstrap(
        ds, grid, B, mult, mode, seed, alpha, n_min, n_workers, stat_pergamma=True
    )


# ---------------------------------------------------------------------------
# original GMM bootstrap: fresh pseudo-data for every candidate
# ---------------------------------------------------------------------------


def _rep_gmm_pergamma(payload, b: int) -> float:
    (prep, mult, homosked, seed, resid2, sig_gamma, common_eta) = payload
    rng = _rng_for(seed, b)
    G, T = resid2.shape
    rows = 1 if common_eta else G
    if mult.is_iid:
        pseudo = sig_gamma[:, None] * draw_multipliers(Multiplier.normal(), (rows, T), rng)
    else:
        pseudo = resid2 * draw_multipliers(mult, (rows, T), rng)
    vals, status = _kernels.gmm_pergamma_stats(prep, pseudo, homosked, two_step=True)
    return _sup_of(vals, status)


def bootstrap_ch(
    ds: Dataset,
    grid: ThresholdGrid,
    B: int,
    mult: Multiplier,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
    common_eta: bool = False,
) -> BootstrapResult:
    """Original scheme: pseudo-data from split residuals, rebuilt for every
    candidate, with fresh weights per candidate (common_eta shares one weight
    vector across candidates within a replicate instead)."""
    homosked = not mode.is_robust
    observed = wg_sequence(
        ds, grid, variant=ResidualSource.per_gamma(), mode=mode, n_min=n_min
    )
    prep = prepare(ds, grid, n_min=n_min)
    resid2, status0 = _kernels.gmm_pergamma_resid2(prep, prep.y, homosked, two_step=True)
    resid2 = np.where(np.isfinite(resid2), resid2, 0.0)
    with np.errstate(invalid="ignore"):
        sig_gamma = np.sqrt(np.einsum("gt,gt->g", resid2, resid2) / prep.T)
    payload = (prep, mult, homosked, seed, resid2, sig_gamma, common_eta)
    raw = _map_replicates(_rep_gmm_pergamma, payload, B, n_workers)
    draws, failed = _collect(raw, B)
    return summarize(draws, observed.sup, alpha, seed=seed, sequence=observed, n_failed=failed)


# ---------------------------------------------------------------------------
# 2SLS bootstrap: endogenous regressors rebuilt through the first stage
# ---------------------------------------------------------------------------


def _chol_sigma_v(sigma_v: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(np.asarray(sigma_v, dtype=np.float64))


def _rep_tsls(payload, b: int):
    (
        prep,
        mult,
        homosked,
        seed,
        theta,
        eps_s,
        uhat_s,
        xhat_s,
        fs_kind,
        chol_v,
        want_lr,
        want_w,
    ) = payload
    rng = _rng_for(seed, b)
    T = prep.T
    p1 = uhat_s.shape[1]
    try:
        if mult.is_iid:
            v_b = draw_multipliers(Multiplier.normal(), (T, 1 + p1), rng) @ chol_v.T
            e_b = v_b[:, 0]
            u_b = v_b[:, 1:]
        else:
            eta = draw_multipliers(mult, T, rng)
            e_b = eps_s * eta
            u_b = uhat_s * eta[:, None]
        x_b = xhat_s + u_b
        w_b = np.hstack([x_b, prep.z1])
        y_b = w_b @ theta + e_b

        if fs_kind == LINEAR:
            pi_b = np.linalg.solve(prep.mzz_tot, prep.z.T @ x_b)
            xhat_b = prep.z @ pi_b
            a_mats = (_augment(pi_b, prep),)
            rho_cut = -1
        else:
            ssr, st = _kernels.tfs_rho_ssr(prep, x_b, n_min=prep.n_min)
            ok = (st == OK) & np.isfinite(ssr)
            if not ok.any():
                return (np.nan, np.nan)
            masked = np.where(ok, ssr, np.inf)
            g_star = int(np.argmin(masked))
            rho_cut = int(prep.cuts[g_star])
            m1 = prep.mzz_c[g_star]
            s1 = prep.z[:rho_cut].T @ x_b[:rho_cut]
            pi1_b = np.linalg.solve(m1, s1)
            pi2_b = np.linalg.solve(prep.mzz_tot - m1, prep.z.T @ x_b - s1)
            xhat_b = np.empty_like(x_b)
            xhat_b[:rho_cut] = prep.z[:rho_cut] @ pi1_b
            xhat_b[rho_cut:] = prep.z[rho_cut:] @ pi2_b
            a_mats = (_augment(pi1_b, prep), _augment(pi2_b, prep))

        what_b = np.hstack([xhat_b, prep.z1])
        theta_b = np.linalg.solve(what_b.T @ what_b, what_b.T @ y_b)
        resid0 = y_b - what_b @ theta_b
        ssr0 = float(resid0 @ resid0)
        theta_bx = theta_b[:p1]
        eps_b = y_b - w_b @ theta_b
        u_res = x_b - xhat_b
        b_comb = u_res @ theta_bx
        dof = T - 2 * theta_b.shape[0]
        s_ee = s_eb = s_bb = 0.0
        if homosked:
            vhat_b = np.column_stack([eps_b, u_res])
            sig_v = vhat_b.T @ vhat_b / T
            s_ee = float(sig_v[0, 0])
            s_eb = float(sig_v[0, 1:] @ theta_bx)
            s_bb = float(theta_bx @ sig_v[1:, 1:] @ theta_bx)
        if fs_kind == LINEAR:
            lr, wv, status = _kernels.tsls_sequences_lfs(
                prep, what_b, y_b, eps_b, b_comb, a_mats[0], ssr0, dof,
                homosked, s_ee, s_eb, s_bb, want_lr, want_w,
            )
        else:
            lr, wv, status = _kernels.tsls_sequences_tfs(
                prep, what_b, y_b, eps_b, b_comb, a_mats[0], a_mats[1], rho_cut,
                ssr0, dof, homosked, s_ee, s_eb, s_bb, want_lr, want_w,
            )
        sup_lr = _sup_of(lr, status) if want_lr else np.nan
        sup_w = _sup_of(wv, status) if want_w else np.nan
        return (sup_lr, sup_w)
    except np.linalg.LinAlgError:
        return (np.nan, np.nan)


def _augment(pi: np.ndarray, prep) -> np.ndarray:
    p2 = prep.z1.shape[1]
    qz = prep.z.shape[1]
    s = np.zeros((p2, qz))
    s[:, :p2] = np.eye(p2)
    return np.vstack([pi.T, s])


def bootstrap_2sls_both(
    ds: Dataset,
    grid: ThresholdGrid,
    fs: FirstStageSpec,
    B: int,
    mult: Multiplier,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
) -> tuple[BootstrapResult, BootstrapResult]:
    """2SLS bootstrap returning the LR and Wald results from shared replicates.

    One weight vector per replicate multiplies both the first-stage and the
    structural residuals before the sample is rebuilt; the first stage
    (including its threshold, when present) is re-estimated inside every
    replicate.
    """
    lr_obs, w_obs = tsls_sequences(ds, grid, fs, mode=mode, n_min=n_min)
    homosked = not mode.is_robust
    prep = prepare(ds, grid, n_min=n_min)

    theta = tsls_full(ds, fs).theta
    eps = structural_residuals(ds, theta)
    uhat = ds.x - fs.xhat
    eps_s = prep.sort(eps)
    uhat_s = prep.sort(uhat)
    xhat_s = prep.sort(fs.xhat)

    chol_v = None
    if mult.is_iid:
        sigma_v = mult.sigma_v
        if sigma_v is None:
            vhat = np.column_stack([eps, uhat])
            sigma_v = vhat.T @ vhat / ds.T
        chol_v = _chol_sigma_v(sigma_v)

    payload = (
        prep, mult, homosked, seed, theta, eps_s, uhat_s, xhat_s,
        fs.kind, chol_v, True, True,
    )
    raw = _map_replicates(_rep_tsls, payload, B, n_workers)
    lr_draws, lr_failed = _collect([r[0] for r in raw], B)
    w_draws, w_failed = _collect([r[1] for r in raw], B)
    lr_res = summarize(lr_draws, lr_obs.sup, alpha, seed=seed, sequence=lr_obs, n_failed=lr_failed)
    w_res = summarize(w_draws, w_obs.sup, alpha, seed=seed, sequence=w_obs, n_failed=w_failed)
    return lr_res, w_res


def bootstrap_2sls(
    ds: Dataset,
    grid: ThresholdGrid,
    fs: FirstStageSpec,
    B: int,
    mult: Multiplier,
    kind: str,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
) -> BootstrapResult:
    """2SLS bootstrap for a single statistic kind ('lr' or 'wald')."""
    lr_res, w_res = bootstrap_2sls_both(
        ds, grid, fs, B, mult, mode=mode, seed=seed, alpha=alpha,
        n_min=n_min, n_workers=n_workers,
    )
    if kind == "lr":
        return lr_res
    if kind == "wald":
        return w_res
    raise ConfigError(f"unknown 2SLS statistic kind {kind!r}")


# ---------------------------------------------------------------------------
# OLS linearity pre-test bootstrap for the first stage
# ---------------------------------------------------------------------------


def _rep_first_stage(payload, b: int):
    (ds, grid, mode, seed, xhat0, uhat0, mult, n_min) = payload
    rng = _rng_for(seed, b)
    T = xhat0.shape[0]
    if mult.is_iid:
        sig_u = uhat0.T @ uhat0 / T
        u_b = draw_multipliers(Multiplier.normal(), (T, uhat0.shape[1]), rng) @ np.linalg.cholesky(sig_u).T
    else:
        u_b = uhat0 * draw_multipliers(mult, T, rng)[:, None]
    x_b = xhat0 + u_b
    try:
        lr_res, w_res = first_stage_linearity_tests(ds, grid, mode=mode, n_min=n_min, x=x_b)
        return (lr_res.sup, w_res.sup)
    except Exception:
        return (np.nan, np.nan)


def bootstrap_first_stage(
    ds: Dataset,
    grid: ThresholdGrid,
    B: int,
    mult: Multiplier,
    mode: VarianceMode = VarianceMode.robust(),
    seed: int = 0,
    alpha: float = 0.05,
    n_min: int | None = None,
    n_workers: int | None = None,
) -> tuple[BootstrapResult, BootstrapResult]:
    """Wild null bootstrap of the OLS first-stage linearity tests."""
    lr_obs, w_obs = first_stage_linearity_tests(ds, grid, mode=mode, n_min=n_min)
    pi_full = np.linalg.solve(ds.z.T @ ds.z, ds.z.T @ ds.x)
    xhat0 = ds.z @ pi_full
    uhat0 = ds.x - xhat0
    payload = (ds, grid, mode, seed, xhat0, uhat0, mult, n_min)
    raw = _map_replicates(_rep_first_stage, payload, B, n_workers)
    lr_draws, lr_failed = _collect([r[0] for r in raw], B)
    w_draws, w_failed = _collect([r[1] for r in raw], B)
    lr_res = summarize(lr_draws, lr_obs.sup, alpha, seed=seed, sequence=lr_obs, n_failed=lr_failed)
    w_res = summarize(w_draws, w_obs.sup, alpha, seed=seed, sequence=w_obs, n_failed=w_failed)
    return lr_res, w_res
