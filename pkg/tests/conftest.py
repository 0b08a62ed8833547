"""Shared helpers: seeded random IV instances with optional thresholds."""

from __future__ import annotations

import numpy as np
import pytest

from threshold_iv import Dataset


def make_dataset(
    T=60,
    p1=1,
    p2=2,
    qz=3,
    seed=0,
    noise=1.0,
    u_scale=1.0,
    delta_theta=0.0,
    gamma0=0.0,
    delta_pi=0.0,
    rho0=0.0,
) -> Dataset:
    """Random IV instance: strong instruments, endogenous x, optional
    thresholds in the structural equation (delta_theta at gamma0) and the
    first stage (delta_pi at rho0). q is continuous (no ties)."""
    rng = np.random.default_rng(seed)
    z_exog = rng.standard_normal((T, p2 - 1)) if p2 > 1 else np.empty((T, 0))
    z1 = np.column_stack([np.ones(T), z_exog])
    z_extra = rng.standard_normal((T, qz - p2))
    z = np.column_stack([z1, z_extra])
    q = rng.standard_normal(T)
    e = rng.standard_normal(T)
    u = 0.5 * e[:, None] + np.sqrt(0.75) * rng.standard_normal((T, p1))
    pi = rng.uniform(0.7, 1.3, size=(qz, p1)) * np.where(
        rng.random((qz, p1)) < 0.5, -1.0, 1.0
    )
    x = z @ pi + u_scale * u
    if delta_pi != 0.0:
        x = x + delta_pi * (z @ pi) * (q > rho0)[:, None]
    theta = rng.uniform(0.5, 1.5, size=p1 + p2)
    w = np.column_stack([x, z1])
    y = w @ theta + noise * e
    if delta_theta != 0.0:
        y = y + delta_theta * (w @ theta) * (q > gamma0)
    return Dataset(y=y, x=x, z1=z1, z=z, q=q)


def duplicated_regime_dataset(T0=25, seed=3) -> Dataset:
    """Two identical copies of a base sample split by q: the candidate at the
    copy boundary has bit-identical regimes."""
    base = make_dataset(T=T0, seed=seed)
    q = np.concatenate([np.zeros(T0), np.ones(T0)])
    return Dataset(
        y=np.tile(base.y, 2),
        x=np.tile(base.x, (2, 1)),
        z1=np.tile(base.z1, (2, 1)),
        z=np.tile(base.z, (2, 1)),
        q=q,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
