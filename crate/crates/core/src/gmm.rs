//! GMM estimation of the regression coefficients.
//!
//! The quadratic form is `Q_N(beta) = G_N(beta)' W G_N(beta)`. Two-step GMM
//! minimizes it first with `W = I`, then with `W = V_N(beta_1)^{-1}`.
//! Continuously-updating GMM re-evaluates `V_N(beta)^{-1}` at every point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Link;
use crate::error::{Error, Result};
use crate::moments::{column_means, mean_and_second_moment, BoundSystem};
use crate::numerics::{
    factor_pd, minimize_from, Minimum, OptimizerSettings, OptimizerStatus, RegularizedCholesky,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GmmStage {
    OneStep,
    TwoStep,
    Cu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmDiagnostics {
    pub status: OptimizerStatus,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Ridge added when inverting the moment covariance.
    pub ridge: f64,
    pub first_stage_status: Option<OptimizerStatus>,
    pub first_stage_beta: Option<Vec<f64>>,
    pub multistart: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub weight: DMatrix<f64>,
    pub stage: GmmStage,
    pub diagnostics: GmmDiagnostics,
}

impl GmmFit {
    /// Whether the final stage met the gradient tolerance. A fit that did not
    /// is still returned and flagged downstream.
    pub fn converged(&self) -> bool {
        self.diagnostics.status == OptimizerStatus::Converged
    }
}

fn check_weight(bound: &BoundSystem<'_>, weight: &DMatrix<f64>) -> Result<()> {
    let j = bound.j();
    if weight.shape() != (j, j) {
        return Err(Error::DimensionMismatch(format!(
            "weight is {}x{}, moment dimension is {j}",
            weight.nrows(),
            weight.ncols()
        )));
    }
    Ok(())
}

/// `G_N(beta)' W G_N(beta)`.
pub fn gmm_objective(
    bound: &BoundSystem<'_>,
    beta: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<f64> {
    check_weight(bound, weight)?;
    let g = bound.mean(beta)?;
    Ok(g.dot(&(weight * &g)))
}

/// Quadratic form and its analytic gradient `2 J' W G`.
pub fn gmm_objective_and_gradient(
    bound: &BoundSystem<'_>,
    beta: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_weight(bound, weight)?;
    let (m, jac) = bound.with_jacobian(beta)?;
    let g = column_means(&m);
    let wg = weight * &g;
    Ok((g.dot(&wg), jac.tr_mul(&wg) * 2.0))
}

/// `G' (V + lambda I)^{-1} G` and its gradient evaluated through the
/// Cholesky factor of the weight's inverse. Forming the inverse explicitly
/// loses several digits when the ridge is active, enough to stall the line
/// search near the optimum.
fn whitened_objective_and_gradient(
    bound: &BoundSystem<'_>,
    beta: &DVector<f64>,
    factor: &RegularizedCholesky,
) -> Result<(f64, DVector<f64>)> {
    let (m, jac) = bound.with_jacobian(beta)?;
    let g = column_means(&m);
    let e = factor.whiten(&DMatrix::from_column_slice(g.len(), 1, g.as_slice()))?;
    let ej = factor.whiten(&jac)?;
    let e = e.column(0);
    Ok((e.dot(&e), ej.tr_mul(&e) * 2.0))
}

/// Continuously-updating objective `G' (V_N(beta) + lambda I)^{-1} G`, its
/// gradient (holding the ridge fixed) and the ridge used.
pub fn cu_objective_and_gradient(
    bound: &BoundSystem<'_>,
    beta: &DVector<f64>,
) -> Result<(f64, DVector<f64>, f64)> {
    let m = bound.moment_matrix(beta)?;
    let (g, v) = mean_and_second_moment(&m);
    let chol = factor_pd(&v)?;
    let a = chol.solve(&g)?;
    let value = g.dot(&a);
    let n = bound.subjects() as f64;
    let k = bound.k();
    let mut grad = DVector::zeros(k);
    bound.for_each_subject(beta, |_, gi, dgi| {
        let a_gi: f64 = a.iter().zip(gi).map(|(x, y)| x * y).sum();
        let a_dgi = dgi.tr_mul(&a);
        // 2 a'J_q  -  a' dV_q a,   dV_q = (1/n) sum (dg_q g' + g dg_q')
        for q in 0..k {
            grad[q] += (2.0 * a_dgi[q] - 2.0 * a_dgi[q] * a_gi) / n;
        }
    });
    Ok((value, grad, chol.ridge()))
}

/// Trial-step cap used for coefficient searches unless the caller sets one.
/// Logit moments vanish as every fitted probability saturates, so an
/// unbounded first step can land in that spurious region.
pub const DEFAULT_GMM_MAX_STEP: f64 = 1.0;

fn run_stage<F>(
    objective: F,
    start: &DVector<f64>,
    h0: Option<DMatrix<f64>>,
    settings: &OptimizerSettings,
) -> Result<Minimum>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let k = start.len();
    let settings = OptimizerSettings {
        max_step: settings.max_step.or(Some(DEFAULT_GMM_MAX_STEP)),
        ..*settings
    };
    minimize_from(
        |b| objective(b).unwrap_or_else(|_| (f64::NAN, DVector::from_element(k, f64::NAN))),
        start,
        h0.as_ref(),
        &settings,
    )
}

/// Inverse of the Gauss-Newton Hessian `2 A'A`, where `A` is the Jacobian
/// premultiplied by the square root of the weight. Seeds BFGS so identity-link
/// fits (exactly quadratic) converge in a step or two.
fn gauss_newton_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let h = a.tr_mul(a) * 2.0;
    factor_pd(&h).ok().map(|c| c.inverse())
}

/// Starting points tried when the first stage of a logit fit fails: the
/// origin and `±0.5` along each coordinate.
fn multistart_points(k: usize) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(k)];
    for p in 0..k {
        for delta in [0.5, -0.5] {
            let mut v = DVector::zeros(k);
            v[p] = delta;
            out.push(v);
        }
    }
    out
}

fn better(a: &Minimum, b: &Minimum) -> bool {
    match (a.converged(), b.converged()) {
        (true, false) => true,
        (false, true) => false,
        _ => a.value < b.value,
    }
}

/// Fits whose mean Bernoulli variance `mu (1 - mu)` falls below this are
/// saturated: every logit moment vector is numerically zero there, which
/// makes the quadratic form vanish without fitting anything.
pub const SATURATION_FLOOR: f64 = 1e-3;

/// Mean of `mu (1 - mu)` over all observations (logit link), or `None` for
/// the identity link.
pub fn mean_bernoulli_variance(bound: &BoundSystem<'_>, beta: &DVector<f64>) -> Option<f64> {
    let design = bound.design();
    if design.model().link != Link::Logit {
        return None;
    }
    let (n, t) = (design.dataset().subjects(), design.dataset().times());
    let mut sum = 0.0;
    for i in 0..n {
        for s in 0..t {
            let mu = design.mean_response(beta, i, s);
            sum += mu * (1.0 - mu);
        }
    }
    Some(sum / (n * t) as f64)
}

/// Whether a logit fit has run off to the saturated region.
pub fn is_saturated(bound: &BoundSystem<'_>, beta: &DVector<f64>) -> bool {
    mean_bernoulli_variance(bound, beta).is_some_and(|v| v < SATURATION_FLOOR)
}

/// Default starting value: the zero vector for both links.
pub fn default_start(bound: &BoundSystem<'_>) -> DVector<f64> {
    DVector::zeros(bound.k())
}

/// Two-step efficient GMM.
pub fn two_step_gmm(
    bound: &BoundSystem<'_>,
    beta0: &DVector<f64>,
    settings: &OptimizerSettings,
) -> Result<GmmFit> {
    let k = bound.k();
    if beta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "beta0 has length {}, model has {k} parameters",
            beta0.len()
        )));
    }
    if beta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("beta0".into()));
    }
    let j = bound.j();
    let identity = DMatrix::<f64>::identity(j, j);
    let stage1 = |b: &DVector<f64>| gmm_objective_and_gradient(bound, b, &identity);
    let stage1_from = |b: &DVector<f64>| -> Result<Minimum> {
        let h0 = gauss_newton_inverse(&bound.with_jacobian(b)?.1);
        run_stage(stage1, b, h0, settings)
    };

    let mut first = stage1_from(beta0)?;
    let mut multistart = false;
    if !first.converged() && bound.design().model().link == Link::Logit {
        multistart = true;
        for start in multistart_points(k) {
            if let Ok(candidate) = stage1_from(&start) {
                if better(&candidate, &first) {
                    first = candidate;
                }
            }
        }
    }

    let (_, v) = bound.mean_and_cov(&first.x)?;
    let chol = factor_pd(&v)?;
    let weight = chol.inverse();
    let h0 = gauss_newton_inverse(&chol.whiten(&bound.with_jacobian(&first.x)?.1)?);
    let second = run_stage(
        |b| whitened_objective_and_gradient(bound, b, &chol),
        &first.x,
        h0,
        settings,
    )?;

    Ok(GmmFit {
        objective: second.value.max(0.0),
        diagnostics: GmmDiagnostics {
            status: second.status,
            iterations: second.iterations,
            gradient_norm: second.gradient_norm(),
            ridge: chol.ridge(),
            first_stage_status: Some(first.status),
            first_stage_beta: Some(first.x.iter().copied().collect()),
            multistart,
        },
        beta: second.x,
        weight,
        stage: GmmStage::TwoStep,
    })
}

/// Continuously-updating GMM started from `beta0`.
pub fn cu_gmm(
    bound: &BoundSystem<'_>,
    beta0: &DVector<f64>,
    settings: &OptimizerSettings,
) -> Result<GmmFit> {
    let k = bound.k();
    if beta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "beta0 has length {}, model has {k} parameters",
            beta0.len()
        )));
    }
    // surface singular-covariance errors at the start instead of as NaNs
    cu_objective_and_gradient(bound, beta0)?;
    let min = run_stage(
        |b| cu_objective_and_gradient(bound, b).map(|(f, g, _)| (f, g)),
        beta0,
        None,
        settings,
    )?;
    let (g, v) = bound.mean_and_cov(&min.x)?;
    let chol = factor_pd(&v)?;
    let weight = chol.inverse();
    let objective = g.dot(&chol.solve(&g)?).max(0.0);
    Ok(GmmFit {
        beta: min.x.clone(),
        objective,
        weight,
        stage: GmmStage::Cu,
        diagnostics: GmmDiagnostics {
            status: min.status,
            iterations: min.iterations,
            gradient_norm: min.gradient_norm(),
            ridge: chol.ridge(),
            first_stage_status: None,
            first_stage_beta: None,
            multistart: false,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        CovariateColumn, CovariateSpec, ModelSpec, PanelDataset, ResponseFamily, TdcType,
    };
    use crate::moments::MomentSystem;

    fn exact_fit() -> (PanelDataset, MomentSystem) {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = x.clone();
        let d = PanelDataset::new(
            ResponseFamily::Continuous,
            y,
            vec![CovariateColumn {
                name: "x".into(),
                values: x,
                time_independent: false,
            }],
        )
        .unwrap();
        let m = ModelSpec::new(
            vec![CovariateSpec::new("x", TdcType::TypeI)],
            Link::Identity,
        );
        (d, MomentSystem::new(m, 1).unwrap())
    }

    #[test]
    fn objective_examples() {
        let (d, sys) = exact_fit();
        let b = sys.bind(&d).unwrap();
        let beta = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(
            gmm_objective(&b, &beta, &DMatrix::identity(2, 2)).unwrap(),
            0.0
        );
        // G at beta = (0, 0): residual = x -> G = (mean x, mean x^2) = (1, 5/3)
        let zero = DVector::zeros(2);
        let q = gmm_objective(&b, &zero, &DMatrix::identity(2, 2)).unwrap();
        assert!((q - (1.0 + 25.0 / 9.0)).abs() < 1e-14);
        assert!(matches!(
            gmm_objective(&b, &zero, &DMatrix::identity(3, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn just_identified_exact_fit() {
        let (d, sys) = exact_fit();
        let b = sys.bind(&d).unwrap();
        let settings = OptimizerSettings::default();
        let fit = two_step_gmm(&b, &default_start(&b), &settings).unwrap();
        assert!((fit.beta[0]).abs() < 1e-8 && (fit.beta[1] - 1.0).abs() < 1e-8);
        assert!(fit.objective < 1e-12);
    }

    #[test]
    fn cu_minimizes_its_own_objective() {
        // two periods, Type I: 8 moments for 2 parameters
        let x = DMatrix::from_row_slice(
            6,
            2,
            &[
                0.1, 1.3, -0.7, 0.4, 1.8, -1.1, 0.5, 0.9, -1.4, 0.2, 0.8, -0.3,
            ],
        );
        let noise = [
            0.3, -0.2, -0.4, 0.1, 0.25, -0.35, 0.05, 0.4, -0.15, -0.3, 0.2, 0.1,
        ];
        let y = DMatrix::from_fn(6, 2, |i, t| 0.5 + x[(i, t)] + noise[2 * i + t]);
        let d = PanelDataset::new(
            ResponseFamily::Continuous,
            y,
            vec![CovariateColumn {
                name: "x".into(),
                values: x,
                time_independent: false,
            }],
        )
        .unwrap();
        let sys = MomentSystem::new(
            ModelSpec::new(
                vec![CovariateSpec::new("x", TdcType::TypeI)],
                Link::Identity,
            ),
            2,
        )
        .unwrap();
        let b = sys.bind(&d).unwrap();
        let settings = OptimizerSettings::default();
        let two = two_step_gmm(&b, &default_start(&b), &settings).unwrap();
        let cu = cu_gmm(&b, &two.beta, &settings).unwrap();
        let (at_two, _, _) = cu_objective_and_gradient(&b, &two.beta).unwrap();
        assert!(cu.objective <= at_two + 1e-12);
        let (_, grad, _) = cu_objective_and_gradient(&b, &cu.beta).unwrap();
        assert!(grad.norm() < 1e-6);
    }

    #[test]
    fn stage_two_never_worse_than_stage_one_start() {
        let (d, sys) = exact_fit();
        let b = sys.bind(&d).unwrap();
        let fit = two_step_gmm(
            &b,
            &DVector::from_vec(vec![3.0, -2.0]),
            &OptimizerSettings::default(),
        )
        .unwrap();
        let at_first = gmm_objective(
            &b,
            &DVector::from_vec(fit.diagnostics.first_stage_beta.clone().unwrap()),
            &fit.weight,
        )
        .unwrap();
        assert!(fit.objective <= at_first + 1e-15);
    }

    #[test]
    fn bad_start_dimension() {
        let (d, sys) = exact_fit();
        let b = sys.bind(&d).unwrap();
        assert!(two_step_gmm(&b, &DVector::zeros(3), &OptimizerSettings::default()).is_err());
    }
}
