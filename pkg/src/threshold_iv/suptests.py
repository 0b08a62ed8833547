"""Per-candidate statistic sequences and their sup tests.

Four statistics are provided: the GMM sup-Wald in its original (split
residual) and corrected (full-sample null residual) variants, and the
2SLS-based sup-LR and sup-Wald. The argmax of a sequence doubles as the
threshold estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import OK, SINGULAR, TOO_SMALL, prepare
from ._kernels._prep import prefix_at_cuts
from .covariance import ResidualSource, VarianceMode
from .data import Dataset, ThresholdGrid
from .estimators import (
    LINEAR,
    THRESHOLD,
    FirstStageSpec,
    gmm_full,
    predicted_regressors,
)
from .exceptions import AllCandidatesFailed, ConfigError
from .linalg import solve_checked

GMM_CH = "gmm-ch"
GMM_BR = "gmm-br"
GMM_MIX = "gmm-mix"  # null bootstrap around the split-residual statistic
TSLS_LR = "lr"
TSLS_WALD = "wald"


@dataclass(frozen=True)
class TestKind:
    """A sup-test selection; first_stage matters for the 2SLS kinds only."""

    kind: str
    first_stage: str = LINEAR

    def __post_init__(self):
        if self.kind not in (GMM_CH, GMM_BR, GMM_MIX, TSLS_LR, TSLS_WALD):
            raise ConfigError(f"unknown test kind {self.kind!r}")
        if self.first_stage not in (LINEAR, THRESHOLD):
            raise ConfigError(f"unknown first stage {self.first_stage!r}")

    @property
    def is_tsls(self) -> bool:
        return self.kind in (TSLS_LR, TSLS_WALD)


@dataclass(frozen=True)
class SkippedCandidate:
    gamma: float
    reason: str


_REASONS = {TOO_SMALL: "regime too small", SINGULAR: "singular moments"}


@dataclass(frozen=True)
class SequenceResult:
    """Statistic sequence over the evaluated grid candidates.

    ``grid`` holds the candidates that produced a value; candidates that
    failed estimation are listed in ``skipped`` rather than silently dropped.
    """

    grid: ThresholdGrid
    values: np.ndarray
    sup: float
    argmax_gamma: float
    skipped: tuple[SkippedCandidate, ...] = ()


def _wrap(gammas, trim, values, status) -> SequenceResult:
    status = np.asarray(status)
    values = np.asarray(values, dtype=np.float64)
    bad_value = np.isnan(values) & (status == OK)
    status = np.where(bad_value, SINGULAR, status)
    ok = status == OK
    skipped = tuple(
        SkippedCandidate(gamma=float(g), reason=_REASONS.get(int(s), "failed"))
        for g, s in zip(gammas[~ok], status[~ok])
    )
    if not ok.any():
        raise AllCandidatesFailed(
            f"all {len(gammas)} grid candidates failed: "
            + "; ".join(sorted({s.reason for s in skipped}))
        )
    kept = values[ok]
    kept_gammas = gammas[ok]
    best = int(np.argmax(kept))  # first occurrence: smallest gamma on ties
    grid = ThresholdGrid(values=kept_gammas, trim=trim)
    return SequenceResult(
        grid=grid,
        values=kept,
        sup=float(kept[best]),
        argmax_gamma=float(kept_gammas[best]),
        skipped=skipped,
    )


def wg_sequence(
    ds: Dataset,
    grid: ThresholdGrid,
    variant: ResidualSource = ResidualSource.full_sample_null(),
    mode: VarianceMode = VarianceMode.robust(),
    n_min: int | None = None,
    two_step: bool = True,
    h_resid_override: np.ndarray | None = None,
) -> SequenceResult:
    """GMM sup-Wald sequence.

    The variant controls the residuals inside the robust weight: split
    per-candidate residuals (original test) or full-sample null residuals
    (corrected test). ``h_resid_override`` injects an explicit residual
    vector for the weight, bypassing the variant (testing hook).
    """
    prep = prepare(ds, grid, n_min=n_min)
    homosked = not mode.is_robust
    if h_resid_override is not None:
        r = prep.sort(np.asarray(h_resid_override, dtype=np.float64).reshape(-1))
        vals, status = _kernels.gmm_fixed_resid_stats(prep, prep.y, r, homosked, two_step)
    elif variant.kind == ResidualSource.per_gamma().kind:
        vals, status = _kernels.gmm_pergamma_stats(prep, prep.y, homosked, two_step)
    else:
        m_hat = ds.z.T @ ds.z / ds.T
        fit1 = gmm_full(ds, m_hat)
        r = prep.sort(fit1.residuals)
        vals, status = _kernels.gmm_fixed_resid_stats(prep, prep.y, r, homosked, two_step)
    return _wrap(prep.gammas, grid.trim, vals, status)


def _homosked_scalars(vhat: np.ndarray, theta_x: np.ndarray, T: int, mode: VarianceMode):
    sigma_v = mode.sigma_v if mode.sigma_v is not None else vhat.T @ vhat / T
    s_ee = float(sigma_v[0, 0])
    s_eb = float(sigma_v[0, 1:] @ theta_x)
    s_bb = float(theta_x @ sigma_v[1:, 1:] @ theta_x)
    return s_ee, s_eb, s_bb


def tsls_sequences(
    ds: Dataset,
    grid: ThresholdGrid,
    fs: FirstStageSpec,
    mode: VarianceMode = VarianceMode.robust(),
    n_min: int | None = None,
    want_lr: bool = True,
    want_w: bool = True,
) -> tuple[SequenceResult | None, SequenceResult | None]:
    """LR and Wald sequences for the split-2SLS tests, sharing one pass."""
    if fs.xhat.shape[0] != ds.T:
        raise ConfigError("first stage was fitted on a different dataset")
    dof = ds.T - 2 * ds.p
    if dof <= 0:
        raise ConfigError(f"T = {ds.T} too small for the LR denominator T - 2p")
    prep = prepare(ds, grid, n_min=n_min)
    what = prep.sort(predicted_regressors(ds, fs))
    theta = solve_checked(what.T @ what, what.T @ prep.y, what="second-stage gram")
    ssr0 = float(np.sum((prep.y - what @ theta) ** 2))
    theta_x = theta[: ds.p1]
    eps = prep.sort(ds.y - ds.w @ theta)
    uhat = prep.sort(ds.x - fs.xhat)
    b = uhat @ theta_x
    homosked = not mode.is_robust
    s_ee = s_eb = s_bb = 0.0
    if homosked:
        vhat = np.column_stack([eps, uhat])
        s_ee, s_eb, s_bb = _homosked_scalars(vhat, theta_x, ds.T, mode)
    if fs.kind == LINEAR:
        a_mat = _augmented_from(fs.pi, ds)
        lr, wv, status = _kernels.tsls_sequences_lfs(
            prep, what, prep.y, eps, b, a_mat, ssr0, dof, homosked,
            s_ee, s_eb, s_bb, want_lr, want_w,
        )
    else:
        a1 = _augmented_from(fs.pi1, ds)
        a2 = _augmented_from(fs.pi2, ds)
        rho_cut = prep.cut_for(fs.rho)
        lr, wv, status = _kernels.tsls_sequences_tfs(
            prep, what, prep.y, eps, b, a1, a2, rho_cut, ssr0, dof, homosked,
            s_ee, s_eb, s_bb, want_lr, want_w,
        )
    lr_res = _wrap(prep.gammas, grid.trim, lr, status) if want_lr else None
    w_res = _wrap(prep.gammas, grid.trim, wv, status) if want_w else None
    return lr_res, w_res


def _augmented_from(pi: np.ndarray, ds: Dataset) -> np.ndarray:
    s = np.zeros((ds.p2, ds.qz))
    s[:, : ds.p2] = np.eye(ds.p2)
    return np.vstack([pi.T, s])


def lr_sequence(
    ds: Dataset,
    grid: ThresholdGrid,
    fs: FirstStageSpec,
    n_min: int | None = None,
) -> SequenceResult:
    """Sup-LR sequence (SSR contrast of split versus full 2SLS)."""
    lr_res, _ = tsls_sequences(ds, grid, fs, n_min=n_min, want_lr=True, want_w=False)
    return lr_res


def w_sequence(
    ds: Dataset,
    grid: ThresholdGrid,
    fs: FirstStageSpec,
    mode: VarianceMode = VarianceMode.robust(),
    n_min: int | None = None,
) -> SequenceResult:
    """Sup-Wald sequence with the first-stage-aware split variance."""
    _, w_res = tsls_sequences(ds, grid, fs, mode=mode, n_min=n_min, want_lr=False, want_w=True)
    return w_res


def first_stage_linearity_tests(
    ds: Dataset,
    grid: ThresholdGrid,
    mode: VarianceMode = VarianceMode.robust(),
    n_min: int | None = None,
    x: np.ndarray | None = None,
) -> tuple[SequenceResult, SequenceResult]:
    """OLS sup-LR and sup-Wald tests of a linear against a threshold first stage.

    Each column of x is regressed on z by OLS; the LR form contrasts trace
    SSRs, the Wald form stacks vec(Pi1 - Pi2) with its robust variance.
    ``x`` may override the dependent block (bootstrap resampling hook).
    """
    prep = prepare(ds, grid, n_min=n_min)
    x_s = prep.x if x is None else prep.sort(np.asarray(x, dtype=np.float64))
    T, qz, p1 = ds.T, ds.qz, ds.p1
    dof = T - 2 * qz
    if dof <= 0:
        raise ConfigError(f"T = {T} too small for the first-stage LR denominator")

    szx_tot = prep.z.T @ x_s
    pi_full = solve_checked(prep.mzz_tot, szx_tot, what="instrument gram")
    resid0 = x_s - prep.z @ pi_full
    ssr0 = float(np.einsum("ij,ij->", resid0, resid0))
    scale = float(np.einsum("ij,ij->", x_s, x_s))
    perfect_fit = ssr0 <= 1e-12 * max(scale, 1e-300)
    if perfect_fit:
        ssr0 = 0.0  # the linear fit is already exact; no split can improve it

    ssr1, status = _kernels.tfs_rho_ssr(prep, x_s, n_min=prep.n_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr_vals = np.where(ssr1 > 0.0, (ssr0 - ssr1) / (ssr1 / dof), np.inf)
    lr_vals = np.where(ssr0 - ssr1 <= 0.0, 0.0, lr_vals)

    # Wald form: stacked slope differences with per-regime sandwich variances
    w_vals = np.full(prep.G, np.nan)
    w_status = status.copy()
    zx = np.einsum("ti,tj->tij", prep.z, x_s)
    szx_c = prefix_at_cuts(zx, prep.cuts)
    uhat0 = resid0
    if mode.is_robust:
        gu = np.einsum("tm,tq->tmq", uhat0, prep.z).reshape(T, -1)
        hu_c = prefix_at_cuts(np.einsum("ti,tj->tij", gu, gu), prep.cuts)
        hu_tot = gu.T @ gu
    else:
        sigma_u = mode.sigma_v if mode.sigma_v is not None else uhat0.T @ uhat0 / T
    eye_p1 = np.eye(p1)
    for g in range(prep.G):
        if status[g] != OK:
            continue
        if perfect_fit:
            # degenerate: slope differences and their variance are both noise
            w_vals[g] = 0.0
            continue
        k = prep.cuts[g]
        m1 = prep.mzz_c[g]
        m2 = prep.mzz_tot - m1
        try:
            pi1 = np.linalg.solve(m1, szx_c[g])
            pi2 = np.linalg.solve(m2, szx_tot - szx_c[g])
            m1i = np.linalg.inv(m1)
            m2i = np.linalg.inv(m2)
        except np.linalg.LinAlgError:
            w_status[g] = SINGULAR
            continue
        d = (pi1 - pi2).T.ravel()
        if mode.is_robust:
            h1 = hu_c[g]
            h2 = hu_tot - h1
            v1 = np.kron(eye_p1, m1i) @ h1 @ np.kron(eye_p1, m1i)
            v2 = np.kron(eye_p1, m2i) @ h2 @ np.kron(eye_p1, m2i)
        else:
            v1 = np.kron(sigma_u, m1i)
            v2 = np.kron(sigma_u, m2i)
        v = v1 + v2
        if not d.any():
            w_vals[g] = 0.0
            continue
        try:
            np.linalg.cholesky(0.5 * (v + v.T))
            w_vals[g] = max(float(d @ np.linalg.solve(v, d)), 0.0)
        except np.linalg.LinAlgError:
            w_status[g] = SINGULAR
    lr_res = _wrap(prep.gammas, grid.trim, lr_vals, status)
    w_res = _wrap(prep.gammas, grid.trim, w_vals, w_status)
    return lr_res, w_res
