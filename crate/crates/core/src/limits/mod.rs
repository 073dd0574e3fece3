//! Limit-theorem experiments: moment generating functions, eigendata, variance,
//! Berry–Esseen, local limit, deviations and a fixed-fiber spectral check.

mod chain;
mod rpf;

pub use chain::{log_sum_exp, FiberChain, MeasureKind, TiltedLaw, TiltedSampler};
pub use rpf::{
    convergence_experiment, eigen_residual, rpf_extract, ConvergenceRun, Fiber, LogMgf, Projector,
    RpfTriplet,
};
mod variance;
pub use variance::{
    cumulative_variance, first_derivative, quenched_variance, second_derivative, second_moments, variance,
    VarianceReport, VarianceRow, DEGENERATE_VARIANCE, FD_STEP,
};
mod clt;
pub use clt::{
    berry_esseen_experiment, fourier_law, lclt_experiment, BeReport, BeRow, LcltReport, LcltRow, Method, DKW_ALPHA,
    FOURIER_POINTS,
};
mod deviations;
pub use deviations::{
    large_deviations, moderate_deviations, pressure_and_rates, DeviationKind, DeviationReport, DeviationRow,
    DeviationSetup, Pressure, PressureCurve, PRESSURE_N,
};
mod spectral;
pub use spectral::{fixed_fiber_spectral_radius, spectral_radius, SpectralTable};

use serde::{Deserialize, Serialize};

/// A finished experiment: its parameters, a result table and the verdict
/// against a criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub parameters: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub constants: serde_json::Value,
    pub passed: Option<bool>,
}
