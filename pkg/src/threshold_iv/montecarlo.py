"""Simulation DGPs and seeded rejection-frequency / size-adjusted-power runs.

The design: y = 1 + x + dx * x * 1[q > gamma0] + eps with an endogenous
scalar x = 1 + z + dpi * z * 1[q > rho0] + u, instruments (1, z), z ~ N(1,1)
and q = z + 1. Error cases: (a) homoskedastic and known (iid Gaussian
bootstrap, homoskedastic variance analogs), (b) homoskedastic but treated as
unknown, (c) conditionally heteroskedastic eps = e * z / sqrt(2).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing as mp

import numpy as np

from .bootstrap import (
    Multiplier,
    bootstrap_2sls_both,
    bootstrap_ch,
    bootstrap_gmm_br,
    bootstrap_gmm_mix,
    default_workers,
)
from .covariance import ResidualSource, VarianceMode
from .data import Dataset, build_grid
from .estimators import (
    LINEAR,
    THRESHOLD,
    fit_first_stage_linear,
    fit_first_stage_threshold,
)
from .exceptions import ConfigError, EstimationError
from .suptests import (
    GMM_BR,
    GMM_CH,
    GMM_MIX,
    TSLS_LR,
    TSLS_WALD,
    TestKind,
    tsls_sequences,
    wg_sequence,
)

CASE_A = "a"
CASE_B = "b"
CASE_C = "c"

_TEST_ORDER = (GMM_CH, GMM_MIX, GMM_BR, TSLS_LR, TSLS_WALD)


@dataclass(frozen=True)
class DgpConfig:
    T: int
    delta_x: float = 0.0
    delta_pi: float = 0.0
    rho0: float = 1.75
    gamma0: float = 2.25
    error_case: str = CASE_B
    cov_ue: float = 0.5

    def __post_init__(self):
        if self.error_case not in (CASE_A, CASE_B, CASE_C):
            raise ConfigError(f"unknown error case {self.error_case!r}")
        if not -1.0 < self.cov_ue < 1.0:
            raise ConfigError("cov_ue must lie in (-1, 1)")


def generate(dgp: DgpConfig, seed) -> Dataset:
    """Draw one sample from the design; ``seed`` may be anything accepted by
    numpy's SeedSequence, or a Generator."""
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    T = dgp.T
    z = rng.normal(1.0, 1.0, T)
    q = z + 1.0
    e = rng.standard_normal(T)
    # joint (e, u) with unit variances and Cov = cov_ue via a Cholesky factor
    u = dgp.cov_ue * e + math.sqrt(1.0 - dgp.cov_ue**2) * rng.standard_normal(T)
    if dgp.error_case == CASE_C:
        eps = e * z / math.sqrt(2.0)
    else:
        eps = e
    x = 1.0 + z + dgp.delta_pi * z * (q > dgp.rho0) + u
    y = 1.0 + x + dgp.delta_x * x * (q > dgp.gamma0) + eps
    ones = np.ones((T, 1))
    return Dataset(y=y, x=x[:, None], z1=ones, z=np.column_stack([ones, z]), q=q)


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpConfig
    test: TestKind | str
    B: int = 500
    n_sim: int = 1000
    alpha: float = 0.05
    multiplier: Multiplier = field(default_factory=Multiplier.normal)
    seed_bank: int = 0
    trim: float = 0.15

    def __post_init__(self):
        if isinstance(self.test, str):
            object.__setattr__(self, "test", _parse_test(self.test, self.dgp))

    @property
    def mode(self) -> VarianceMode:
        if self.dgp.error_case == CASE_A:
            return VarianceMode.homoskedastic()
        return VarianceMode.robust()

    @property
    def effective_multiplier(self) -> Multiplier:
        """Case (a) always uses the iid Gaussian scheme."""
        if self.dgp.error_case == CASE_A:
            return Multiplier.iid_gaussian()
        return self.multiplier


def _parse_test(name: str, dgp: DgpConfig) -> TestKind:
    """Test label to TestKind; 2SLS kinds match the DGP's first stage."""
    fs = THRESHOLD if (name in (TSLS_LR, TSLS_WALD) and dgp.delta_pi != 0.0) else LINEAR
    return TestKind(name, first_stage=fs)


def _cell_entropy(cfg: ExperimentConfig) -> tuple[int, ...]:
    case_idx = (CASE_A, CASE_B, CASE_C).index(cfg.dgp.error_case)
    test_idx = _TEST_ORDER.index(cfg.test.kind)
    fs_idx = 0 if cfg.test.first_stage == LINEAR else 1
    return (
        int(cfg.seed_bank),
        case_idx,
        int(cfg.dgp.T),
        int(round(cfg.dgp.delta_pi * 1000)),
        int(round(cfg.dgp.delta_x * 1000)),
        test_idx,
        fs_idx,
        int(cfg.B),
        ("normal", "rademacher", "mammen", "iid").index(cfg.multiplier.kind),
        int(round(cfg.trim * 1000)),
    )


def _sim_seeds(entropy: tuple[int, ...], i: int, purpose: int) -> int:
    ss = np.random.SeedSequence(entropy + (int(i), int(purpose)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _fit_first_stage(ds, grid, kind: TestKind):
    if kind.first_stage == THRESHOLD:
        return fit_first_stage_threshold(ds, grid)
    return fit_first_stage_linear(ds)


def observed_sup(ds: Dataset, grid, test: TestKind, mode: VarianceMode) -> float:
    """Sample sup statistic for one test kind (no bootstrap)."""
    if test.kind == GMM_BR:
        return wg_sequence(ds, grid, ResidualSource.full_sample_null(), mode).sup
    if test.kind in (GMM_CH, GMM_MIX):
        return wg_sequence(ds, grid, ResidualSource.per_gamma(), mode).sup
    fs = _fit_first_stage(ds, grid, test)
    lr_res, w_res = tsls_sequences(
        ds, grid, fs, mode=mode,
        want_lr=test.kind == TSLS_LR, want_w=test.kind == TSLS_WALD,
    )
    return (lr_res if test.kind == TSLS_LR else w_res).sup


def _run_one_sim(payload, i: int) -> float:
    """One size/power simulation: 1.0 reject, 0.0 keep, NaN aborted."""
    cfg, entropy = payload
    try:
        ds = generate(cfg.dgp, _sim_seeds(entropy, i, 0))
        grid = build_grid(ds.q, cfg.trim)
        boot_seed = _sim_seeds(entropy, i, 1)
        mode = cfg.mode
        mult = cfg.effective_multiplier
        kind = cfg.test.kind
        if kind == GMM_BR:
            res = bootstrap_gmm_br(ds, grid, cfg.B, mult, mode, boot_seed, cfg.alpha, n_workers=1)
        elif kind == GMM_CH:
            res = bootstrap_ch(ds, grid, cfg.B, mult, mode, boot_seed, cfg.alpha, n_workers=1)
        elif kind == GMM_MIX:
            res = bootstrap_gmm_mix(ds, grid, cfg.B, mult, mode, boot_seed, cfg.alpha, n_workers=1)
        elif kind in (TSLS_LR, TSLS_WALD):
            fs = _fit_first_stage(ds, grid, cfg.test)
            lr_res, w_res = bootstrap_2sls_both(
                ds, grid, fs, cfg.B, mult, mode, boot_seed, cfg.alpha, n_workers=1
            )
            res = lr_res if kind == TSLS_LR else w_res
        else:
            raise ConfigError(f"unknown test kind {kind!r}")
        return 1.0 if res.reject else 0.0
    except EstimationError:
        return float("nan")


@dataclass(frozen=True)
class CellResult:
    case: str
    T: int
    delta_pi: float
    delta_x: float
    test: str
    first_stage: str
    multiplier: str
    rejection: float
    mc_se: float
    n_sim: int
    n_failed: int

    def key(self) -> tuple:
        return (self.case, self.T, self.delta_pi, self.delta_x, self.test,
                self.first_stage, self.multiplier)


def _alpha_one_shortcut(cfg: ExperimentConfig) -> bool:
    return cfg.alpha >= 1.0


def rejection_frequency(cfg: ExperimentConfig, n_workers: int | None = None) -> CellResult:
    """Fraction of seeded simulations whose sup statistic exceeds its
    bootstrap critical value, with the binomial Monte Carlo standard error."""
    entropy = _cell_entropy(cfg)
    if _alpha_one_shortcut(cfg):
        # level-1 test rejects everything by convention
        rejections = np.ones(cfg.n_sim)
    else:
        raw = _map_sims((cfg, entropy), cfg.n_sim, n_workers)
        rejections = np.asarray(raw, dtype=np.float64)
    failed = int(np.count_nonzero(~np.isfinite(rejections)))
    if failed > 0.01 * cfg.n_sim:
        raise EstimationError(f"{failed} of {cfg.n_sim} simulations aborted")
    valid = rejections[np.isfinite(rejections)]
    p_hat = float(valid.mean())
    mc_se = math.sqrt(p_hat * (1.0 - p_hat) / valid.size) if valid.size else float("nan")
    return CellResult(
        case=cfg.dgp.error_case,
        T=cfg.dgp.T,
        delta_pi=cfg.dgp.delta_pi,
        delta_x=cfg.dgp.delta_x,
        test=cfg.test.kind,
        first_stage=cfg.test.first_stage,
        multiplier=cfg.effective_multiplier.kind,
        rejection=p_hat,
        mc_se=mc_se,
        n_sim=int(valid.size),
        n_failed=failed,
    )


def _chunk_sims(args):
    payload, indices = args
    return [_run_one_sim(payload, i) for i in indices]


def _map_sims(payload, n: int, n_workers: int | None):
    workers = default_workers() if n_workers is None else max(1, n_workers)
    if workers <= 1 or n < 2 * workers:
        return [_run_one_sim(payload, i) for i in range(n)]
    chunks = np.array_split(np.arange(n), workers)
    ctx = mp.get_context("fork")
    out: list = [None] * n
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        for chunk, res in zip(
            chunks, pool.map(_chunk_sims, [(payload, list(c)) for c in chunks])
        ):
            for i, val in zip(chunk, res):
                out[int(i)] = val
    return out


def _observed_only(payload, i: int) -> float:
    cfg, entropy, tag = payload
    try:
        ds = generate(cfg.dgp, _sim_seeds(entropy, i, tag))
        grid = build_grid(ds.q, cfg.trim)
        return observed_sup(ds, grid, cfg.test, cfg.mode)
    except EstimationError:
        return float("nan")


def _map_observed(payload, n: int, n_workers):
    workers = default_workers() if n_workers is None else max(1, n_workers)
    if workers <= 1 or n < 2 * workers:
        return [_observed_only(payload, i) for i in range(n)]
    chunks = np.array_split(np.arange(n), workers)
    ctx = mp.get_context("fork")
    out: list = [None] * n
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        for chunk, res in zip(
            chunks,
            pool.map(_chunk_observed, [(payload, list(c)) for c in chunks]),
        ):
            for i, val in zip(chunk, res):
                out[int(i)] = val
    return out


def _chunk_observed(args):
    payload, indices = args
    return [_observed_only(payload, i) for i in indices]


def size_adjusted_power(
    cfg: ExperimentConfig,
    null_cfg: ExperimentConfig,
    n_workers: int | None = None,
) -> float:
    """Power against the empirical null critical value (no bootstrap).

    The null configuration must match cfg except for delta_x = 0; the
    adjustment takes the empirical (1-alpha) quantile of the null sup
    statistics and reports the alternative's exceedance rate.
    """
    if null_cfg.dgp.delta_x != 0.0:
        raise ConfigError("null configuration must have delta_x = 0")
    if replace(null_cfg.dgp, delta_x=cfg.dgp.delta_x) != cfg.dgp:
        raise ConfigError("null configuration must match cfg except for delta_x")
    null_stats = np.asarray(
        _map_observed((null_cfg, _cell_entropy(null_cfg), 2), null_cfg.n_sim, n_workers)
    )
    alt_stats = np.asarray(
        _map_observed((cfg, _cell_entropy(cfg), 3), cfg.n_sim, n_workers)
    )
    null_valid = np.sort(null_stats[np.isfinite(null_stats)])
    alt_valid = alt_stats[np.isfinite(alt_stats)]
    if null_valid.size == 0 or alt_valid.size == 0:
        raise EstimationError("all simulations aborted in the power run")
    k = max(1, math.ceil((1.0 - cfg.alpha) * null_valid.size - 1e-12))
    crit = null_valid[k - 1]
    return float(np.mean(alt_valid > crit))


@dataclass
class RejectionTable:
    """Aggregated rejection frequencies keyed by design cell."""

    cells: dict = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        self.cells[cell.key()] = cell

    def rows(self) -> list[CellResult]:
        return [self.cells[k] for k in sorted(self.cells)]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["case", "T", "delta_pi", "test", "rejection", "mc_se"])
        for cell in self.rows():
            writer.writerow(
                [cell.case, cell.T, cell.delta_pi, cell.test,
                 f"{cell.rejection:.4f}", f"{cell.mc_se:.4f}"]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def run_table(spec: list[ExperimentConfig], n_workers: int | None = None) -> RejectionTable:
    """Run every configured cell and merge order-independently."""
    table = RejectionTable()
    for cfg in spec:
        table.add(rejection_frequency(cfg, n_workers=n_workers))
    return table
