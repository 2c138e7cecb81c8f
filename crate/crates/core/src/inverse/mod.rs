//! The inverse problem: gain and nominal recovery, constraint-parameter
//! inference, grid classification and noise sensitivity.

pub mod classify;
pub mod kkt;
pub mod recover;
pub mod sensitivity;

pub use classify::{
    cell_meets_region, classify_cell, classify_grid, witness_pool, CellStats, GridClassification, GridSpec, Verdict,
};
pub use kkt::{build_kkt_program, infer_theta, replay, KktOptions, KktProgram, KktResiduals, ParamWitness};
pub use recover::{
    gamma_matrix, recover_gain, recover_nominal, recover_nominal_nonlinear, recover_policy, stack_differences,
    DifferenceMatrices, GainDiagnostics, NominalRecovery, NonlinearFit, RecoveredPolicy,
};
pub use sensitivity::{
    active_components, run_noise_sweep, sensitivity_bounds, sweep_csv, SensitivityReport, SweepOptions, SweepRow,
    ROUNDOFF,
};
