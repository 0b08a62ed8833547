"""Tests for an unknown threshold in linear models with endogenous regressors.

Implements the corrected GMM sup-Wald test, two split-2SLS sup tests (LR and
Wald), wild fixed-regressor bootstrap critical values, and a Monte Carlo
harness for size and power experiments.
"""

from .bootstrap import (
    BootstrapResult,
    Multiplier,
    bootstrap_2sls,
    bootstrap_2sls_both,
    bootstrap_ch,
    bootstrap_first_stage,
    bootstrap_gmm_br,
    bootstrap_gmm_mix,
    draw_multipliers,
    summarize,
)
from .covariance import (
    MomentBlocks,
    ResidualSource,
    VarianceMode,
    gmm_wald_variance,
    moment_blocks,
    robust_h_eps,
    tsls_variance_lfs,
    tsls_variance_tfs,
)
from .data import (
    Dataset,
    RegimePartition,
    ThresholdGrid,
    build_dataset,
    build_grid,
    partition,
    trim_bounds,
)
from .estimators import (
    FirstStageSpec,
    FullFit,
    SplitFit,
    fit_first_stage_linear,
    fit_first_stage_threshold,
    gmm_full,
    gmm_step,
    ols_multi,
    predicted_regressors,
    structural_residuals,
    tsls_full,
    tsls_split,
)
from .montecarlo import (
    DgpConfig,
    ExperimentConfig,
    RejectionTable,
    generate,
    rejection_frequency,
    run_table,
    size_adjusted_power,
)
from .suptests import (
    GMM_BR,
    GMM_CH,
    TSLS_LR,
    TSLS_WALD,
    SequenceResult,
    TestKind,
    first_stage_linearity_tests,
    lr_sequence,
    tsls_sequences,
    w_sequence,
    wg_sequence,
)

__version__ = "0.1.0"
