//! Deterministic numerical kernel shared by the estimators.

pub mod linalg;
pub mod optimize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use linalg::{factor_pd, solve_pd, PdSolution, RegularizedCholesky};
pub use optimize::{
    minimize, minimize_from, newton_minimize, newton_minimize_with, Minimum, OptimizerSettings,
    OptimizerStatus,
};

/// `ln(mean(exp(v)))`, evaluated as `max + ln(mean(exp(v - max)))`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_mean_exp input".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("log_mean_exp input".into()));
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + (sum / values.len() as f64).ln())
}

/// Softmax weights `exp(v_i) / sum exp(v)` computed with the same shift.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Random stream used for one replicate or worker.
pub type RngStream = ChaCha8Rng;

/// Independent, reproducible stream for `(master_seed, stream_index)`.
pub fn rng_stream(master_seed: u64, stream_index: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_index);
    rng
}
