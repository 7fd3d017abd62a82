//! Penalized KLIC model selection for longitudinal data with time-dependent
//! covariates.
//!
//! Pipeline: classify covariates, build the valid moment conditions, fit the
//! mean model by GMM, tilt the subject moment vectors, penalize by `k * j`
//! and rank candidates. [`simgen`] generates panels with feedback for
//! simulation studies.

pub mod data;
pub mod error;
pub mod gmm;
pub mod moments;
pub mod numerics;
pub mod selection;
pub mod simgen;
pub mod tilt;

/// Library version, embedded in run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use data::{
    CovariateColumn, CovariateSpec, Link, ModelSpec, PanelDataset, ResponseFamily, TdcType,
};
pub use error::{Error, Result};
pub use gmm::{cu_gmm, two_step_gmm, GmmFit};
pub use moments::{count_moment_conditions, enumerate_valid_pairs, MomentSystem};
pub use numerics::OptimizerSettings;
pub use selection::{
    enumerate_candidates, evaluate_model, run_selection, select_from_fit_terms, sensitivity_sweep,
    Candidate, Criterion, FitTermEntry, SelectionReport,
};
pub use tilt::{fit_gamma, PenaltyConfig, TiltResult};
