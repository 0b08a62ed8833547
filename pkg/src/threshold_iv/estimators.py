"""Closed-form OLS, 2SLS and GMM estimators, full-sample and split-sample.

Includes the grid-search first-stage threshold estimator (argmin of the
trace SSR over candidate split points).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, RegimePartition, ThresholdGrid, partition
from .exceptions import AllCandidatesFailed, RegimeTooSmall, SingularDesign
from .linalg import check_weight, solve_checked

LINEAR = "linear"
THRESHOLD = "threshold"


@dataclass(frozen=True)
class FirstStageSpec:
    """Fitted first stage: linear (pi) or threshold (pi1/pi2 split at rho)."""

    kind: str
    xhat: np.ndarray
    pi: np.ndarray | None = None
    pi1: np.ndarray | None = None
    pi2: np.ndarray | None = None
    rho: float | None = None
    trace_ssr: float | None = None


@dataclass(frozen=True)
class FullFit:
    """Full-sample fit; residuals use the regressor matrix of the variant
    (predicted w-hat for 2SLS, observed w for GMM)."""

    theta: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class SplitFit:
    """Two-regime fit at one candidate threshold; residuals are the
    under-the-alternative residuals, regime-switched over the full sample."""

    theta_low: np.ndarray
    theta_high: np.ndarray
    gamma: float
    residuals: np.ndarray


def ols_multi(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multivariate OLS coefficients (z'z)^{-1} z'x, raising SingularDesign."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return solve_checked(z.T @ z, z.T @ x, what="instrument gram")


def fit_first_stage_linear(ds: Dataset) -> FirstStageSpec:
    """Full-sample linear first stage: x_t on z_t, xhat = Pi' z_t."""
    pi = ols_multi(ds.z, ds.x)
    return FirstStageSpec(kind=LINEAR, pi=pi, xhat=ds.z @ pi)


def _split_ols(z: np.ndarray, x: np.ndarray, mask_low: np.ndarray):
    pi1 = ols_multi(z[mask_low], x[mask_low])
    pi2 = ols_multi(z[~mask_low], x[~mask_low])
    return pi1, pi2


def threshold_ssr_profile(
    ds: Dataset, grid: ThresholdGrid, n_min: int | None = None
) -> np.ndarray:
    """Trace SSR of the split first stage at every grid candidate.

    Failed candidates (tiny regime, singular split gram) carry NaN.
    """
    n_min = ds.default_n_min() if n_min is None else n_min
    out = np.full(len(grid), np.nan)
    for i, rho in enumerate(grid.values):
        try:
            part = partition(ds.q, rho, n_min=n_min)
            pi1, pi2 = _split_ols(ds.z, ds.x, part.mask_low)
        except (RegimeTooSmall, SingularDesign):
            continue
        xhat = np.where(part.mask_low[:, None], ds.z @ pi1, ds.z @ pi2)
        resid = ds.x - xhat
        out[i] = float(np.einsum("ij,ij->", resid, resid))
    return out


def fit_first_stage_threshold(
    ds: Dataset, grid: ThresholdGrid, n_min: int | None = None
) -> FirstStageSpec:
    """Threshold first stage: rho minimizes the trace SSR over the grid.

    Ties break to the smallest grid value; candidates that fail estimation
    are skipped, and AllCandidatesFailed is raised only if none survive.
    """
    ssr = threshold_ssr_profile(ds, grid, n_min=n_min)
    if np.isnan(ssr).all():
        raise AllCandidatesFailed("no grid candidate admits a split first stage")
    best = int(np.nanargmin(ssr))
    rho = float(grid.values[best])
    part = partition(ds.q, rho, n_min=n_min if n_min is not None else ds.default_n_min())
    pi1, pi2 = _split_ols(ds.z, ds.x, part.mask_low)
    xhat = np.where(part.mask_low[:, None], ds.z @ pi1, ds.z @ pi2)
    return FirstStageSpec(
        kind=THRESHOLD,
        pi1=pi1,
        pi2=pi2,
        rho=rho,
        xhat=xhat,
        trace_ssr=float(ssr[best]),
    )


def predicted_regressors(ds: Dataset, fs: FirstStageSpec) -> np.ndarray:
    """Stacked second-stage regressors w-hat_t = (xhat_t', z1_t')'."""
    return np.hstack([fs.xhat, ds.z1])


def tsls_full(ds: Dataset, fs: FirstStageSpec) -> FullFit:
    """Full-sample 2SLS; residuals are y - what' theta (w-hat convention)."""
    what = predicted_regressors(ds, fs)
    theta = solve_checked(what.T @ what, what.T @ ds.y, what="second-stage gram")
    return FullFit(theta=theta, residuals=ds.y - what @ theta)


def tsls_split(ds: Dataset, fs: FirstStageSpec, part: RegimePartition) -> SplitFit:
    """Split-sample 2SLS at one candidate threshold (w-hat residuals)."""
    what = predicted_regressors(ds, fs)
    lo = part.mask_low
    if min(part.n_low, part.n_high) < ds.p:
        raise RegimeTooSmall(
            f"regimes of size ({part.n_low}, {part.n_high}) cannot identify {ds.p} parameters"
        )
    w_lo, w_hi = what[lo], what[~lo]
    th_lo = solve_checked(w_lo.T @ w_lo, w_lo.T @ ds.y[lo], what="low-regime gram")
    th_hi = solve_checked(w_hi.T @ w_hi, w_hi.T @ ds.y[~lo], what="high-regime gram")
    resid = ds.y - np.where(lo, what @ th_lo, what @ th_hi)
    return SplitFit(theta_low=th_lo, theta_high=th_hi, gamma=part.gamma, residuals=resid)


def structural_residuals(ds: Dataset, theta: np.ndarray) -> np.ndarray:
    """Residuals y - w' theta with the observed regressors w_t."""
    return ds.y - ds.w @ np.asarray(theta, dtype=np.float64)


def _gmm_solve(n_mat: np.ndarray, weight: np.ndarray, szy: np.ndarray) -> np.ndarray:
    # theta = (N W^{-1} N')^{-1} N W^{-1} szy, all moments T-normalized
    rhs = solve_checked(weight, np.column_stack([n_mat.T, szy]), what="GMM weight")
    a = n_mat @ rhs[:, :-1]
    c = n_mat @ rhs[:, -1]
    return solve_checked(a, c, what="GMM normal")


def gmm_full(ds: Dataset, weight: np.ndarray) -> FullFit:
    """Full-sample GMM with an explicit qz x qz weight matrix."""
    weight = check_weight(weight)
    T = ds.T
    n_mat = ds.w.T @ ds.z / T
    szy = ds.z.T @ ds.y / T
    theta = _gmm_solve(n_mat, weight, szy)
    return FullFit(theta=theta, residuals=ds.y - ds.w @ theta)


def gmm_step(
    ds: Dataset,
    part: RegimePartition,
    weight: tuple[np.ndarray, np.ndarray],
) -> SplitFit:
    """Split-sample GMM step with explicit per-regime weight matrices."""
    w_lo = check_weight(weight[0], what="low-regime weight")
    w_hi = check_weight(weight[1], what="high-regime weight")
    lo = part.mask_low
    T = ds.T
    th = []
    for mask, wmat in ((lo, w_lo), (~lo, w_hi)):
        n_mat = ds.w[mask].T @ ds.z[mask] / T
        szy = ds.z[mask].T @ ds.y[mask] / T
        th.append(_gmm_solve(n_mat, wmat, szy))
    resid = ds.y - np.where(lo, ds.w @ th[0], ds.w @ th[1])
    return SplitFit(theta_low=th[0], theta_high=th[1], gamma=part.gamma, residuals=resid)


def gmm_null_fits(ds: Dataset, homoskedastic: bool = False) -> tuple[FullFit, FullFit]:
    """Full-sample one-step and two-step GMM under the null of no threshold.

    Step one weights by M-hat; step two by the robust H built from step-one
    residuals (or its homoskedastic analog, under which both steps coincide).
    """
    T = ds.T
    m_hat = ds.z.T @ ds.z / T
    fit1 = gmm_full(ds, m_hat)
    if homoskedastic:
        return fit1, fit1
    r = fit1.residuals
    h_eps = (ds.z * r[:, None] ** 2).T @ ds.z / T
    fit2 = gmm_full(ds, h_eps)
    return fit1, fit2
