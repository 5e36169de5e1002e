"""Exact loss dynamics and spectral analysis for two-phase optimizers."""

from .momentum import (
    EigensolveError,
    ModeParams,
    ModeSystem,
    MomentumFlavor,
    SyncVariant,
    complex_region,
    complex_region_asymptotic,
    critical_outer_rate,
    effective_eigenvalue,
    gpa_khat,
    gpa_matrix,
    inner_cycle_matrix,
    single_step_matrix,
    sla_full_matrix,
    sla_reduced_matrix,
    spectral_summary,
    weight_ema_matrix,
)
from .simulator import (
    ReplicaPlan,
    TrajectoryRecord,
    run_diloco,
    run_la,
    run_sgd,
    write_trajectory_csv,
)
from .spectrum import (
    NtkMatrix,
    Spectrum,
    make_isotropic,
    make_power_law,
    make_spiked,
    realize_ntk,
)
from .sweeps import (
    GainReport,
    GridSpec,
    StabilityMap,
    SweepResult,
    la_vs_sgd_gain,
    linear_grid,
    log_grid,
    loss_grid,
    optimal_eta_curve,
    r_scaling_experiment,
    sla_rate_sweep,
    stability_map,
    theorem_scan,
)
from .theory import (
    NoiseModel,
    StabilityClass,
    TwoPhaseConfig,
    coefficient_ratio,
    diloco_cycle,
    dense_cycle_matrix,
    init_pvec_iid,
    iterate_cycles,
    la_cycle,
    loss_from_pvec,
    noise_coefficient,
    scaling_rule,
    sgd_step,
    stability_region,
    theorem1_check,
)

__version__ = "0.1.0"
