//! Exponential-tilting KLIC and its penalized forms.
//!
//! Given subject moment vectors `g_i` at the GMM estimate, the criterion is
//! `min_gamma (1/N) sum_i exp(gamma' g_i)`. The minimization runs in the log
//! domain (`ln` of the mean is monotone, same argmin) with Newton steps; the
//! objective is convex in `gamma`. When the origin is outside the convex hull
//! of the `g_i` the infimum is zero and unattained, which shows up as a
//! diverging iterate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    log_mean_exp, newton_minimize_with, softmax, OptimizerSettings, OptimizerStatus,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiltStatus {
    Converged,
    HullFailure,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltResult {
    pub gamma: DVector<f64>,
    /// Minimized mean of `exp(gamma' g_i)`.
    pub klic_objective: f64,
    /// `-ln(klic_objective)`.
    pub deviance: f64,
    pub status: TiltStatus,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Largest ridge used in a Newton solve.
    pub ridge: f64,
}

impl TiltResult {
    pub fn converged(&self) -> bool {
        self.status == TiltStatus::Converged
    }
}

/// Log-domain tilting objective `ln mean exp(M gamma)` with gradient and
/// Hessian. Rows of `moments` are subjects.
pub fn tilt_objective(
    moments: &DMatrix<f64>,
    gamma: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let scores = moments * gamma;
    let value = log_mean_exp(scores.as_slice()).unwrap_or(f64::NAN);
    let w = DVector::from_vec(softmax(scores.as_slice()));
    let grad = moments.tr_mul(&w);
    let mut weighted = moments.clone();
    for (mut row, wi) in weighted.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let mut hess = moments.tr_mul(&weighted) - &grad * grad.transpose();
    hess = (&hess + hess.transpose()) * 0.5;
    (value, grad, hess)
}

/// Fit the tilting vector from `gamma = 0`.
pub fn fit_gamma(moments: &DMatrix<f64>, settings: &OptimizerSettings) -> Result<TiltResult> {
    if moments.nrows() == 0 {
        return Err(Error::Empty("no subjects".into()));
    }
    if moments.ncols() == 0 {
        return Err(Error::Empty("moment dimension is zero".into()));
    }
    if moments.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment vectors".into()));
    }
    let j = moments.ncols();
    // every score negative at some gamma: that gamma strictly separates the
    // origin from the moment vectors, so the infimum is 0 and not attained
    let separated = |g: &DVector<f64>| g.amax() > 0.0 && (moments * g).max() < 0.0;
    let min = newton_minimize_with(
        |g| tilt_objective(moments, g),
        &DVector::zeros(j),
        settings,
        separated,
    )?;
    let status = match min.status {
        OptimizerStatus::Converged => TiltStatus::Converged,
        OptimizerStatus::Diverged => TiltStatus::HullFailure,
        OptimizerStatus::MaxIter | OptimizerStatus::Stalled => TiltStatus::MaxIter,
    };
    Ok(TiltResult {
        klic_objective: min.value.exp(),
        deviance: -min.value,
        gradient_norm: min.gradient_norm(),
        iterations: min.iterations,
        ridge: min.max_ridge,
        gamma: min.x,
        status,
    })
}

/// Deviance-scale fit term `-2 N L_N` with `L_N` the tilt deviance and `N`
/// the total observation count.
pub fn klic_deviance_scale(tilt: &TiltResult, n_obs: usize) -> Result<f64> {
    match tilt.status {
        TiltStatus::Converged => Ok(-2.0 * n_obs as f64 * tilt.deviance),
        TiltStatus::HullFailure => Err(Error::HullFailure),
        TiltStatus::MaxIter => Err(Error::TiltNotConverged),
    }
}

/// Penalty multipliers for the two criteria.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub c_mppp: f64,
    pub c_lp: f64,
}

impl PenaltyConfig {
    pub const DEFAULT_C_MPPP: f64 = 0.10;
    pub const DEFAULT_C_LP: f64 = 0.01;

    pub fn new(c_mppp: f64, c_lp: f64) -> Result<Self> {
        let cfg = Self { c_mppp, c_lp };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_mppp > 0.0 && self.c_mppp.is_finite())
            || !(self.c_lp > 0.0 && self.c_lp.is_finite())
        {
            return Err(Error::InvalidConfig(
                "penalty multipliers must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_default(&self) -> bool {
        self.c_mppp == Self::DEFAULT_C_MPPP && self.c_lp == Self::DEFAULT_C_LP
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            c_mppp: Self::DEFAULT_C_MPPP,
            c_lp: Self::DEFAULT_C_LP,
        }
    }
}

pub fn mppp_penalty(k: usize, j: usize, c_mppp: f64) -> f64 {
    c_mppp * (k * j) as f64
}

pub fn lp_penalty(k: usize, j: usize, n_obs: usize, c_lp: f64) -> f64 {
    c_lp * (k * j) as f64 * (n_obs as f64).ln()
}

/// `fit_term + c_mppp * k * j`.
pub fn mppp_klic(fit_term: f64, k: usize, j: usize, config: &PenaltyConfig) -> f64 {
    fit_term + mppp_penalty(k, j, config.c_mppp)
}

/// `fit_term + c_lp * k * j * ln N`.
pub fn lp_klic(fit_term: f64, k: usize, j: usize, n_obs: usize, config: &PenaltyConfig) -> f64 {
    fit_term + lp_penalty(k, j, n_obs, config.c_lp)
}
