"""Variance assembly: GMM weight/Wald variances and the split-2SLS variance
of the threshold-difference estimator, for linear and threshold first stages.

Kronecker-structured blocks are built from per-observation products
v-hat_t (x) z_t (never materializing T full Kronecker matrices); tests check
them against a naive observation-loop oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, RegimePartition
from .estimators import LINEAR, THRESHOLD, FirstStageSpec, predicted_regressors
from .exceptions import BranchMismatch, SingularDesign, SingularWeight
from .linalg import inv_checked, solve_checked, symmetrize

ROBUST = "robust"
HOMOSKEDASTIC = "homoskedastic"

PER_GAMMA = "per-gamma"
FULL_SAMPLE_NULL = "full-sample-null"


@dataclass(frozen=True)
class VarianceMode:
    """Robust (heteroskedasticity-consistent) or homoskedastic-analog variances.

    Homoskedastic mode replaces H_eps by sigma2 * M and the full Kronecker
    blocks by Sigma_v (x) M; when sigma2/sigma_v are None they are computed
    from the residuals in use.
    """

    kind: str = ROBUST
    sigma2: float | None = None
    sigma_v: np.ndarray | None = None

    @classmethod
    def robust(cls) -> "VarianceMode":
        return cls(kind=ROBUST)

    @classmethod
    def homoskedastic(cls, sigma2=None, sigma_v=None) -> "VarianceMode":
        return cls(kind=HOMOSKEDASTIC, sigma2=sigma2, sigma_v=sigma_v)

    @property
    def is_robust(self) -> bool:
        return self.kind == ROBUST


@dataclass(frozen=True)
class ResidualSource:
    """Which residuals feed H_eps: per-candidate split residuals reproduce the
    original test; full-sample null residuals are the corrected variant."""

    kind: str = FULL_SAMPLE_NULL

    @classmethod
    def per_gamma(cls) -> "ResidualSource":
        return cls(kind=PER_GAMMA)

    @classmethod
    def full_sample_null(cls) -> "ResidualSource":
        return cls(kind=FULL_SAMPLE_NULL)


@dataclass(frozen=True)
class MomentBlocks:
    """Per-regime moment matrices at one candidate threshold (T-normalized)."""

    m_low: np.ndarray
    m_high: np.ndarray
    n_low: np.ndarray
    n_high: np.ndarray
    h_eps_low: np.ndarray
    h_eps_high: np.ndarray
    h_full_low: np.ndarray | None = None
    h_full_high: np.ndarray | None = None


def robust_h_eps(
    ds: Dataset, part: RegimePartition, residuals: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-regime residual-weighted second moments T^{-1} sum_i r_t^2 z_t z_t'."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if r.shape[0] != ds.T:
        raise ValueError(f"residual vector has length {r.shape[0]}, expected {ds.T}")
    zr = ds.z * (r * r)[:, None]
    lo = part.mask_low
    h_low = zr[lo].T @ ds.z[lo] / ds.T
    h_high = zr[~lo].T @ ds.z[~lo] / ds.T
    return symmetrize(h_low), symmetrize(h_high)


def kron_rows(vhat: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-observation products g_t = vhat_t (x) z_t, stacked (T, m*qz)."""
    T = z.shape[0]
    return np.einsum("tm,tq->tmq", vhat, z).reshape(T, -1)


def moment_blocks(
    ds: Dataset,
    part: RegimePartition,
    residuals: np.ndarray,
    vhat: np.ndarray | None = None,
) -> MomentBlocks:
    """Assemble M, N, H_eps (and, given vhat, the full Kronecker H) per regime."""
    lo = part.mask_low
    T = ds.T
    m_low = symmetrize(ds.z[lo].T @ ds.z[lo] / T)
    m_high = symmetrize(ds.z[~lo].T @ ds.z[~lo] / T)
    n_low = ds.w[lo].T @ ds.z[lo] / T
    n_high = ds.w[~lo].T @ ds.z[~lo] / T
    h_eps_low, h_eps_high = robust_h_eps(ds, part, residuals)
    h_full_low = h_full_high = None
    if vhat is not None:
        g = kron_rows(np.asarray(vhat, dtype=np.float64), ds.z)
        h_full_low = symmetrize(g[lo].T @ g[lo] / T)
        h_full_high = symmetrize(g[~lo].T @ g[~lo] / T)
    return MomentBlocks(
        m_low=m_low,
        m_high=m_high,
        n_low=n_low,
        n_high=n_high,
        h_eps_low=h_eps_low,
        h_eps_high=h_eps_high,
        h_full_low=h_full_low,
        h_full_high=h_full_high,
    )


def gmm_wald_variance(blocks: MomentBlocks) -> np.ndarray:
    """Wald variance sum_i (N_i H_eps_i^{-1} N_i')^{-1} of the GMM difference."""
    out = np.zeros((blocks.n_low.shape[0],) * 2)
    for n_mat, h in (
        (blocks.n_low, blocks.h_eps_low),
        (blocks.n_high, blocks.h_eps_high),
    ):
        try:
            inner = n_mat @ solve_checked(h, n_mat.T, what="H_eps")
            out += inv_checked(symmetrize(inner), what="GMM Wald inner")
        except SingularDesign as exc:
            raise SingularWeight(str(exc)) from None
    return symmetrize(out)


def _augmented(pi: np.ndarray, p2: int, qz: int) -> np.ndarray:
    """Augmented slope matrix [Pi, S']' with selector S = [I_p2, 0]."""
    s = np.zeros((p2, qz))
    s[:, :p2] = np.eye(p2)
    return np.vstack([pi.T, s])


def _vhat(ds: Dataset, fs: FirstStageSpec, theta_full: np.ndarray) -> np.ndarray:
    """Stacked v-hat_t = (eps-hat_t, u-hat_t')' from full-sample null residuals
    (observed-regressor residuals) and the fitted first stage."""
    eps = ds.y - ds.w @ theta_full
    uhat = ds.x - fs.xhat
    return np.column_stack([eps, uhat])


def _h_on(mask, g, z, T, sigma_v):
    """H block over a subsample: robust from g-rows or Sigma_v (x) M analog."""
    if g is not None:
        return symmetrize(g[mask].T @ g[mask] / T)
    m = z[mask].T @ z[mask] / T
    return symmetrize(np.kron(sigma_v, m))


def _contractors(theta_x: np.ndarray, qz: int):
    """Rows theta-tilde' (x) I and theta-check' (x) I of the variance algebra."""
    theta_x = np.asarray(theta_x, dtype=np.float64).reshape(-1)
    tilde = np.concatenate([[1.0], theta_x])
    check = np.concatenate([[0.0], theta_x])
    eye = np.eye(qz)
    p_row = np.kron(tilde[None, :], eye)
    c_row = np.kron(check[None, :], eye)
    d_row = p_row - c_row  # [1, 0]' (x) I: selects the eps component
    return p_row, c_row, d_row


def _cgamma_sandwich(v1, v12, v2, c_low, c_high) -> np.ndarray:
    c1i = inv_checked(c_low, what="low-regime C")
    c2i = inv_checked(c_high, what="high-regime C")
    out = c1i @ v1 @ c1i - c1i @ v12 @ c2i - c2i @ v12.T @ c1i + c2i @ v2 @ c2i
    return symmetrize(out)


def tsls_variance_lfs(
    ds: Dataset,
    fs: FirstStageSpec,
    part: RegimePartition,
    theta_full: np.ndarray,
    mode: VarianceMode = VarianceMode(),
) -> np.ndarray:
    """Variance of sqrt(T)(theta_low - theta_high) under a linear first stage."""
    if fs.kind != LINEAR:
        raise ValueError("tsls_variance_lfs requires a linear first stage")
    T, qz = ds.T, ds.qz
    lo = part.mask_low
    a_hat = _augmented(fs.pi, ds.p2, qz)
    vhat = _vhat(ds, fs, theta_full)
    theta_x = np.asarray(theta_full, dtype=np.float64)[: ds.p1]

    m_low = ds.z[lo].T @ ds.z[lo] / T
    m_tot = ds.z.T @ ds.z / T
    m_high = m_tot - m_low
    m_inv = inv_checked(m_tot, what="instrument moment")
    r_low = m_low @ m_inv
    r_high = m_high @ m_inv

    g = sigma_v = None
    if mode.is_robust:
        g = kron_rows(vhat, ds.z)
    else:
        sigma_v = mode.sigma_v if mode.sigma_v is not None else vhat.T @ vhat / T
    h_low = _h_on(lo, g, ds.z, T, sigma_v)
    h_high = _h_on(~lo, g, ds.z, T, sigma_v)
    h_tot = h_low + h_high

    p_row, _, _ = _contractors(theta_x, qz)
    # F_i applies R_i to the u-contraction: theta-check' (x) R_i
    check = np.concatenate([[0.0], theta_x])
    f_low = np.kron(check[None, :], r_low)
    f_high = np.kron(check[None, :], r_high)
    d_low = p_row - f_low
    d_high = p_row - f_high

    v1 = a_hat @ (d_low @ h_low @ d_low.T + f_low @ h_high @ f_low.T) @ a_hat.T
    v2 = a_hat @ (d_high @ h_high @ d_high.T + f_high @ h_low @ f_high.T) @ a_hat.T
    v12 = a_hat @ (-d_low @ h_low @ f_high.T - f_low @ h_high @ d_high.T) @ a_hat.T

    what = predicted_regressors(ds, fs)
    c_low = what[lo].T @ what[lo] / T
    c_high = what[~lo].T @ what[~lo] / T
    return _cgamma_sandwich(symmetrize(v1), v12, symmetrize(v2), c_low, c_high)


def _tfs_bbar_blocks(ds, fs, part, theta_full, mode, branch):
    """The three distinct blocks of the split-2SLS variance for a threshold
    first stage, on the requested gamma-versus-rho branch ('low': gamma<=rho)."""
    T, qz = ds.T, ds.qz
    lo = part.mask_low
    rho_mask = ds.q <= fs.rho
    a1 = _augmented(fs.pi1, ds.p2, qz)
    a2 = _augmented(fs.pi2, ds.p2, qz)
    vhat = _vhat(ds, fs, theta_full)
    theta_x = np.asarray(theta_full, dtype=np.float64)[: ds.p1]

    g = sigma_v = None
    if mode.is_robust:
        g = kron_rows(vhat, ds.z)
    else:
        sigma_v = mode.sigma_v if mode.sigma_v is not None else vhat.T @ vhat / T

    def m_on(mask):
        return ds.z[mask].T @ ds.z[mask] / T

    def h_on(mask):
        return _h_on(mask, g, ds.z, T, sigma_v)

    p_row, _, d_row = _contractors(theta_x, qz)
    check = np.concatenate([[0.0], theta_x])

    h1_rho = h_on(rho_mask)
    h2_rho = h_on(~rho_mask)
    v_b = symmetrize(a1 @ d_row @ h1_rho @ d_row.T @ a1.T + a2 @ d_row @ h2_rho @ d_row.T @ a2.T)

    if branch == "low":
        # gamma <= rho: regime 1 lies inside the rho-low subsample
        h1_g = h_on(lo)
        r1 = m_on(lo) @ inv_checked(m_on(rho_mask), what="M below rho")
        f1 = np.kron(check[None, :], r1)
        d1 = p_row - f1
        h_delta = h1_rho - h1_g
        v1 = symmetrize(a1 @ (d1 @ h1_g @ d1.T + f1 @ h_delta @ f1.T) @ a1.T)
        v12 = a1 @ (d1 @ h1_g - f1 @ h_delta) @ d_row.T @ a1.T - v1
    else:
        # gamma > rho: regime 2 lies inside the rho-high subsample
        h2_g = h_on(~lo)
        h1_g = h_on(lo)
        r2 = m_on(~lo) @ inv_checked(m_on(~rho_mask), what="M above rho")
        f2 = np.kron(check[None, :], r2)
        d2 = p_row - f2
        h_delta = h1_g - h1_rho
        v1 = symmetrize(
            a1 @ d_row @ h1_rho @ d_row.T @ a1.T
            + a2
            @ (
                (d_row + f2) @ h_delta @ (d_row + f2).T
                + (d_row - d2) @ h2_g @ (d_row - d2).T
            )
            @ a2.T
        )
        v12 = a2 @ ((d_row - d2) @ h2_g @ d2.T - (f2 + d_row) @ h_delta @ f2.T) @ a2.T
    v2 = v_b - v1 - v12 - v12.T
    return v1, v12, symmetrize(v2)


def tsls_variance_tfs(
    ds: Dataset,
    fs: FirstStageSpec,
    part: RegimePartition,
    theta_full: np.ndarray,
    mode: VarianceMode = VarianceMode(),
) -> np.ndarray:
    """Variance of sqrt(T)(theta_low - theta_high) under a threshold first stage.

    Branches on gamma versus the estimated first-stage threshold (ties use the
    gamma <= rho branch).
    """
    if fs.kind != THRESHOLD:
        raise ValueError("tsls_variance_tfs requires a threshold first stage")
    lo = part.mask_low
    expected = ds.q <= part.gamma
    if not np.array_equal(lo, expected):
        raise BranchMismatch(
            "partition mask does not match q <= gamma; cannot resolve the rho branch"
        )
    branch = "low" if part.gamma <= fs.rho else "high"
    v1, v12, v2 = _tfs_bbar_blocks(ds, fs, part, theta_full, mode, branch)

    T = ds.T
    what = predicted_regressors(ds, fs)
    c_low = what[lo].T @ what[lo] / T
    c_high = what[~lo].T @ what[~lo] / T
    return _cgamma_sandwich(v1, v12, v2, c_low, c_high)
