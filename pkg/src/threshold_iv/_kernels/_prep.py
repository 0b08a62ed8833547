"""Shared preparation for the sequence kernels.

Observations are sorted by the threshold variable once, so every candidate
split becomes a prefix of the sorted sample; grid-fixed moment prefixes are
precomputed here with NumPy so both kernel backends consume identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset, ThresholdGrid

# status codes shared by all sequence kernels
OK = 0
TOO_SMALL = 1
SINGULAR = 2

_RIDGE_SCALE = 1e-10


def pd_solve_np(a: np.ndarray, b: np.ndarray):
    """Solve a PD system, allowing one diagonal ridge; None if hopeless.

    Both kernel backends share this rule (the compiled one reimplements it),
    so candidate status codes agree across backends.
    """
    try:
        np.linalg.cholesky(a)
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    ridge = _RIDGE_SCALE * np.trace(a) / n
    if ridge <= 0.0:
        return None
    try:
        repaired = a + ridge * np.eye(n)
        np.linalg.cholesky(repaired)
        return np.linalg.solve(repaired, b)
    except np.linalg.LinAlgError:
        return None


def _sorted_copy(a: np.ndarray, order: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64)[order])


@dataclass
class PreparedSample:
    """Dataset sorted by q plus grid cut indices and fixed moment prefixes.

    All moment arrays hold raw (un-normalized) sums; ``cuts[g]`` is the number
    of observations with q_t <= gamma_g. Replicate-invariant per-candidate
    objects (transposed views, split-GMM solve maps) are cached lazily so
    bootstrap loops do not rebuild them.
    """

    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    z1: np.ndarray
    order: np.ndarray
    gammas: np.ndarray
    cuts: np.ndarray
    n_min: int
    mzz_c: np.ndarray  # (G, qz, qz) prefix sums of z z' at the cuts
    mzz_tot: np.ndarray
    nwz_c: np.ndarray  # (G, p, qz) prefix sums of w z' at the cuts
    nwz_tot: np.ndarray
    _cache: dict = None

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def G(self) -> int:
        return self.cuts.shape[0]

    def cut_for(self, gamma: float) -> int:
        return int(np.searchsorted(self.q, gamma, side="right"))

    def sort(self, a: np.ndarray) -> np.ndarray:
        """Reorder a per-observation array into the sorted-by-q layout."""
        return _sorted_copy(a, self.order)

    def unsort(self, a_sorted: np.ndarray) -> np.ndarray:
        out = np.empty_like(a_sorted)
        out[self.order] = a_sorted
        return out

    def gmm_cache(self) -> dict:
        """Per-candidate fixed objects for the split-GMM kernels.

        zt/wt are transposed contiguous copies (unit-stride dots); l1/l2 map
        the raw instrument-outcome sums to first-step estimates; q_inv is the
        inverse of the summed homoskedastic Wald kernel; zzt stacks the upper
        triangle of z z' per observation for residual-weighted moments.
        """
        if self._cache is None:
            object.__setattr__(self, "_cache", self._build_gmm_cache())
        return self._cache

    def _build_gmm_cache(self) -> dict:
        T, qz = self.z.shape
        p = self.w.shape[1]
        G = self.G
        zt = np.ascontiguousarray(self.z.T)
        wt = np.ascontiguousarray(self.w.T)
        iu, ju = np.triu_indices(qz)
        zzt = np.ascontiguousarray((self.z[:, iu] * self.z[:, ju]).T)
        cww = np.einsum("ti,tj->tij", self.w, self.w)
        cww_c = np.ascontiguousarray(prefix_at_cuts(cww, self.cuts))
        cww_tot = cww.sum(axis=0)

        l1 = np.zeros((G, p, qz))
        l2 = np.zeros((G, p, qz))
        q_inv = np.zeros((G, p, p))
        ok = np.zeros(G, dtype=np.uint8)
        eye = np.eye(p)
        for g in range(G):
            k = int(self.cuts[g])
            if k < self.n_min or T - k < self.n_min:
                continue
            n1 = self.nwz_c[g]
            n2 = self.nwz_tot - n1
            m1 = self.mzz_c[g]
            m2 = self.mzz_tot - m1
            x1 = pd_solve_np(m1, n1.T)
            x2 = pd_solve_np(m2, n2.T)
            if x1 is None or x2 is None:
                continue
            a1 = n1 @ x1
            a2 = n2 @ x2
            sol1 = pd_solve_np(0.5 * (a1 + a1.T), np.column_stack([x1.T, eye]))
            sol2 = pd_solve_np(0.5 * (a2 + a2.T), np.column_stack([x2.T, eye]))
            if sol1 is None or sol2 is None:
                continue
            l1[g] = sol1[:, :qz]
            l2[g] = sol2[:, :qz]
            ksum = sol1[:, qz:] + sol2[:, qz:]
            qi = pd_solve_np(0.5 * (ksum + ksum.T), eye)
            if qi is None:
                continue
            q_inv[g] = qi
            if np.isfinite(l1[g]).all() and np.isfinite(l2[g]).all() and np.isfinite(qi).all():
                ok[g] = 1
        return {
            "zt": zt,
            "wt": wt,
            "zzt": zzt,
            "zz_iu": np.ascontiguousarray(iu.astype(np.int64)),
            "zz_ju": np.ascontiguousarray(ju.astype(np.int64)),
            "cww_c": cww_c,
            "cww_tot": np.ascontiguousarray(cww_tot),
            "l1": l1,
            "l2": l2,
            "q_inv": np.ascontiguousarray(0.5 * (q_inv + q_inv.transpose(0, 2, 1))),
            "ok": ok,
        }


def prefix_at_cuts(values: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Prefix sums of per-observation values (first axis) at the cut indices."""
    csum = np.cumsum(values, axis=0)
    out = csum[cuts - 1]
    out[cuts == 0] = 0.0
    return out


def prepare(ds: Dataset, grid: ThresholdGrid, n_min: int | None = None) -> PreparedSample:
    n_min = ds.default_n_min() if n_min is None else int(n_min)
    order = np.argsort(ds.q, kind="stable")
    q = _sorted_copy(ds.q, order)
    z = _sorted_copy(ds.z, order)
    w = _sorted_copy(ds.w, order)
    x = _sorted_copy(ds.x, order)
    y = _sorted_copy(ds.y, order)
    z1 = _sorted_copy(ds.z1, order)
    gammas = np.asarray(grid.values, dtype=np.float64)
    cuts = np.searchsorted(q, gammas, side="right").astype(np.int64)

    zz = np.einsum("ti,tj->tij", z, z)
    wz = np.einsum("ti,tj->tij", w, z)
    mzz_c = prefix_at_cuts(zz, cuts)
    nwz_c = prefix_at_cuts(wz, cuts)
    return PreparedSample(
        z=z,
        w=w,
        x=x,
        y=y,
        q=q,
        z1=z1,
        order=order,
        gammas=gammas,
        cuts=cuts,
        n_min=n_min,
        mzz_c=np.ascontiguousarray(mzz_c),
        mzz_tot=np.ascontiguousarray(zz.sum(axis=0)),
        nwz_c=np.ascontiguousarray(nwz_c),
        nwz_tot=np.ascontiguousarray(wz.sum(axis=0)),
    )
