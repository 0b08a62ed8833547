"""Small shared linear-algebra helpers with loud singularity handling."""

from __future__ import annotations

import warnings

import numpy as np

from .exceptions import NumericalRidgeWarning, SingularDesign, SingularWeight

# Relative tolerance 1e-10 on the condition estimate: solves fail loudly once
# cond(A) exceeds 1/1e-10 instead of drifting into pseudo-inverse territory.
COND_LIMIT = 1e10


def solve_checked(a: np.ndarray, b: np.ndarray, what: str = "design"):
    """Solve ``a @ x = b`` after a rank-revealing condition check.

    Raises SingularDesign (with the condition estimate) instead of silently
    pseudo-inverting near-singular systems.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesign(f"singular {what} matrix", cond=float(cond))
    return np.linalg.solve(a, b)


def inv_checked(a: np.ndarray, what: str = "design") -> np.ndarray:
    return solve_checked(a, np.eye(a.shape[0]), what=what)


def check_weight(w: np.ndarray, what: str = "weight") -> np.ndarray:
    """Validate a GMM weight matrix: symmetric positive definite."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise SingularWeight(f"{what} matrix must be square, got {w.shape}")
    if not np.allclose(w, w.T, rtol=0.0, atol=1e-8 * max(1.0, np.abs(w).max())):
        raise SingularWeight(f"{what} matrix is not symmetric")
    try:
        np.linalg.cholesky(w)
    except np.linalg.LinAlgError:
        raise SingularWeight(f"{what} matrix is not positive definite") from None
    cond = np.linalg.cond(w)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularWeight(f"{what} matrix is numerically singular (cond {cond:.3e})")
    return w


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def ensure_pd(a: np.ndarray, what: str = "variance") -> np.ndarray:
    """Return ``a`` symmetrized, ridged once if round-off broke definiteness.

    The ridge is 1e-10 * trace/n on the diagonal, applied at most once; a
    second failure raises. Each ridge application emits NumericalRidgeWarning
    so edge-of-grid behaviour stays diagnosable.
    """
    a = symmetrize(np.asarray(a, dtype=np.float64))
    try:
        np.linalg.cholesky(a)
        return a
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    ridge = 1e-10 * np.trace(a) / n
    if ridge <= 0.0:
        ridge = 1e-14
    repaired = a + ridge * np.eye(n)
    try:
        np.linalg.cholesky(repaired)
    except np.linalg.LinAlgError:
        raise SingularDesign(f"{what} matrix not PD even after ridge") from None
    warnings.warn(
        f"{what} matrix required a diagonal ridge {ridge:.3e}",
        NumericalRidgeWarning,
        stacklevel=2,
    )
    return repaired


def quad_form_inv(v: np.ndarray, d: np.ndarray, what: str = "variance") -> float:
    """Compute ``d' v^{-1} d`` for symmetric PD ``v``, with one ridge retry.

    Exact-zero ``d`` short-circuits to 0.0 so degenerate pseudo-data (for
    example an all-zero bootstrap sample) stays finite and deterministic.
    """
    d = np.asarray(d, dtype=np.float64)
    if not d.any():
        return 0.0
    v = ensure_pd(v, what=what)
    x = solve_checked(v, d, what=what)
    return float(max(d @ x, 0.0))
