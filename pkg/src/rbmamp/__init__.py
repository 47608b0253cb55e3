"""Compressed-sensing AMP with an RBM-driven structured sparsity prior."""

from .gb_amp import (
    AmpOptions,
    AmpResult,
    AmpState,
    DimensionError,
    DivergenceError,
    GbPrior,
    MeasurementModel,
    amp_iterate,
    denoise,
    init_state,
    run_amp,
    support_log_evidence,
)
from .rbm import (
    BinaryRbm,
    FpiOptions,
    MagnetizationState,
    TrainConfig,
    cd1_epoch,
    exact_enumeration,
    fpi_step,
    free_energy,
    hidden_update,
    load_rbm,
    save_rbm,
    solve_fpi,
    train_rbm,
    visible_update,
)
from .rbm_prior import (
    BaselinePrior,
    RbmSupportPrior,
    baseline_rho,
    rho_from_magnetization,
    update_support,
)

__version__ = "0.1.0"
