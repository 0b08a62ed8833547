"""Observed data containers, regime partitioning and candidate-threshold grids.

All containers are immutable after construction (their arrays are set
read-only), so they can be shared freely across parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DegenerateThresholdVariable,
    EmptyGrid,
    RegimeTooSmall,
)

# Fuzz for the order-statistic indices ceil(trim*T) / floor((1-trim)*T):
# guards against 0.15 * 20 evaluating to 3.0000000000000004.
_INDEX_FUZZ = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Observed series for one threshold-IV problem.

    y : (T,) dependent variable
    x : (T, p1) endogenous regressors
    z1 : (T, p2) exogenous regressors, intercept column included
    z : (T, qz) instruments; the first p2 columns must equal z1
    q : (T,) threshold variable
    """

    y: np.ndarray
    x: np.ndarray
    z1: np.ndarray
    z: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        y = _freeze(np.asarray(self.y).reshape(-1))
        q = _freeze(np.asarray(self.q).reshape(-1))
        x = _freeze(np.atleast_2d(np.asarray(self.x)).reshape(len(y), -1))
        z1 = _freeze(np.atleast_2d(np.asarray(self.z1)).reshape(len(y), -1))
        z = _freeze(np.atleast_2d(np.asarray(self.z)).reshape(len(y), -1))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z1", z1)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "q", q)

        T = y.shape[0]
        if T < 1:
            raise ValueError("empty dataset")
        for name, arr in (("x", x), ("z1", z1), ("z", z), ("q", q)):
            if arr.shape[0] != T:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {T}")
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")
        if not np.isfinite(y).all():
            raise ValueError("non-finite entries in y")
        if x.shape[1] < 1:
            raise ValueError("need at least one endogenous regressor (p1 >= 1)")
        if z1.shape[1] < 1:
            raise ValueError("need at least one exogenous regressor (p2 >= 1)")
        if z.shape[1] - z1.shape[1] < x.shape[1]:
            raise ValueError(
                f"order condition violated: qz - p2 = {z.shape[1] - z1.shape[1]} "
                f"< p1 = {x.shape[1]}"
            )
        if not np.array_equal(z[:, : z1.shape[1]], z1):
            raise ValueError("first p2 columns of z must equal z1 exactly")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p1(self) -> int:
        return self.x.shape[1]

    @property
    def p2(self) -> int:
        return self.z1.shape[1]

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    @property
    def qz(self) -> int:
        return self.z.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Observed structural regressors w_t = (x_t', z1_t')'."""
        out = np.hstack([self.x, self.z1])
        out.setflags(write=False)
        return out

    def default_n_min(self) -> int:
        """Minimum observations per regime: enough to solve each split fit."""
        return self.p + 1


def build_dataset(y, x, z1, z_extra, q) -> Dataset:
    """Assemble a Dataset from separate exogenous and extra-instrument blocks."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64)).reshape(len(y), -1)
    if z_extra is None:
        z = z1
    else:
        z_extra = np.atleast_2d(np.asarray(z_extra, dtype=np.float64)).reshape(len(y), -1)
        z = np.hstack([z1, z_extra])
    return Dataset(y=y, x=x, z1=z1, z=z, q=q)


@dataclass(frozen=True)
class ThresholdGrid:
    """Sorted unique candidate thresholds inside the trimmed quantile band."""

    values: np.ndarray
    trim: float

    def __post_init__(self):
        values = _freeze(np.asarray(self.values).reshape(-1))
        object.__setattr__(self, "values", values)
        if values.size == 0:
            raise EmptyGrid("threshold grid is empty")
        if np.any(np.diff(values) <= 0):
            raise ValueError("grid values must be strictly increasing")
        if not 0.0 <= self.trim < 0.5:
            raise ValueError(f"trim must lie in [0, 0.5), got {self.trim}")

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class RegimePartition:
    """Split of the sample at one candidate threshold (ties go low: q <= gamma)."""

    gamma: float
    mask_low: np.ndarray = field(repr=False)
    n_low: int = 0
    n_high: int = 0


def trim_bounds(q: np.ndarray, trim: float) -> tuple[float, float]:
    """Empirical quantile band [Q(trim), Q(1-trim)] by order statistics.

    Lower bound is q_(ceil(trim*T)), upper is q_(floor((1-trim)*T)), both
    1-indexed on the sorted sample; trim = 0 keeps the full range.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    T = q.shape[0]
    qs = np.sort(q)
    lo_idx = max(1, math.ceil(trim * T - _INDEX_FUZZ))
    hi_idx = min(T, math.floor((1.0 - trim) * T + _INDEX_FUZZ))
    return float(qs[lo_idx - 1]), float(qs[hi_idx - 1])


def build_grid(q: np.ndarray, trim: float) -> ThresholdGrid:
    """All unique realizations of q inside the trimmed quantile band.

    Duplicate realizations produce identical partitions and are dropped.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] < 2:
        raise ValueError("need at least two observations to build a grid")
    if not 0.0 <= trim < 0.5:
        raise ValueError(f"trim must lie in [0, 0.5), got {trim}")
    uniq = np.unique(q)
    if uniq.size < 2:
        raise DegenerateThresholdVariable("threshold variable is constant")
    lo, hi = trim_bounds(q, trim)
    values = uniq[(uniq >= lo) & (uniq <= hi)]
    if values.size == 0:
        raise EmptyGrid(f"no realizations of q inside [{lo}, {hi}]")
    return ThresholdGrid(values=values, trim=float(trim))


def partition(q: np.ndarray, gamma: float, n_min: int = 1) -> RegimePartition:
    """Partition observations by the indicator q_t <= gamma."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if not np.isfinite(gamma):
        raise ValueError(f"gamma must be finite, got {gamma}")
    mask_low = q <= gamma
    mask_low.setflags(write=False)
    n_low = int(mask_low.sum())
    n_high = int(q.shape[0] - n_low)
    if min(n_low, n_high) < n_min:
        raise RegimeTooSmall(
            f"split at gamma={gamma} leaves regimes of size ({n_low}, {n_high}); "
            f"need at least {n_min} observations each"
        )
    return RegimePartition(gamma=float(gamma), mask_low=mask_low, n_low=n_low, n_high=n_high)
