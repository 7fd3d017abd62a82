//! Panel generator with covariate/response feedback, and the scenario runner
//! that repeats generate -> fit -> tilt -> penalize over replicates.
//!
//! Per subject, covariates start at `x_k0 ~ N(0, sigma_k^2)` and the response
//! at `y_0` drawn from the mean model without feedback. For `t = 1..T`:
//!
//! ```text
//! x_kt ~ N(rho_yx_k * z_{t-1}, sigma_k^2)
//! eta_t = b0 + sum_k b_k x_kt
//!       + sum_{l=1..L} [ sum_k rho_xy_k * logit(F_k(x_{k,t-l})) + rho_yy * z_{t-l} ]
//! y_t ~ Bernoulli(logistic(eta_t))  or  N(eta_t, sigma_0^2)
//! ```
//!
//! with `z = logit(F_Y(y))`. `F_k` is the `N(0, sigma_k^2)` cdf; for a
//! continuous response `F_Y` is the `N(b0, sigma_0^2)` cdf, for a binary
//! response it is the Bernoulli(logistic(b0)) cdf clamped to
//! `[clamp, 1 - clamp]`. Only `t = 1..T` is kept.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    logistic, logit, CovariateColumn, CovariateSpec, Link, ModelSpec, PanelDataset, ResponseFamily,
    TdcType,
};
use crate::error::{Error, Result};
use crate::numerics::{rng_stream, OptimizerSettings, RngStream};
use crate::selection::{evaluate_model, Candidate};
use crate::tilt::{lp_penalty, mppp_penalty, PenaltyConfig};

/// Standardized arguments are clamped to this range before `logit(Phi(.))`.
pub const NORMAL_SCORE_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub tdc: TdcType,
    pub sigma: f64,
    /// Coefficient in the data-generating mean.
    pub beta: f64,
    /// Effect of the lagged covariate on the response.
    pub rho_xy: f64,
    /// Effect of the lagged response on the covariate.
    pub rho_yx: f64,
    /// Whether `beta` enters the response mean. Unnecessary predictors are
    /// generated but left out.
    pub in_response: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub subjects: usize,
    pub times: usize,
    pub replicates: usize,
    pub family: ResponseFamily,
    pub link: Link,
    pub intercept: f64,
    /// Response noise scale for the continuous family; also the scale of
    /// `F_Y`.
    pub sigma0: f64,
    pub covariates: Vec<SimCovariate>,
    pub rho_yy: f64,
    pub lag: usize,
    /// Clamp applied to the binary `F_Y` before `logit`.
    pub binary_clamp: f64,
    pub seed: u64,
}

impl SimulationConfig {
    /// The published design: intercept 0.580, five covariates with types
    /// (I, II, III, II, III), all feedback effects 0.25 where the type allows
    /// them, `x4` and `x5` generated but outside the mean.
    pub fn paper_default(
        family: ResponseFamily,
        subjects: usize,
        times: usize,
        replicates: usize,
        seed: u64,
    ) -> Self {
        let spec = [
            ("x1", TdcType::TypeI, 2.2, -0.049, true),
            ("x2", TdcType::TypeII, 3.5, -0.010, true),
            ("x3", TdcType::TypeIII, 1.5, -0.091, true),
            ("x4", TdcType::TypeII, 4.2, -0.280, false),
            ("x5", TdcType::TypeIII, 0.8, 0.004, false),
        ];
        let covariates = spec
            .into_iter()
            .map(|(name, tdc, sigma, beta, in_response)| SimCovariate {
                name: name.into(),
                tdc,
                sigma,
                beta,
                rho_xy: if tdc == TdcType::TypeI { 0.0 } else { 0.25 },
                rho_yx: if tdc == TdcType::TypeIII { 0.25 } else { 0.0 },
                in_response,
            })
            .collect();
        Self {
            subjects,
            times,
            replicates,
            family,
            link: match family {
                ResponseFamily::Binary => Link::Logit,
                ResponseFamily::Continuous => Link::Identity,
            },
            intercept: 0.580,
            sigma0: 1.0,
            covariates,
            rho_yy: 0.25,
            lag: 1,
            binary_clamp: 0.05,
            seed,
        }
    }

    /// Zero every feedback effect and relabel all covariates Type I.
    pub fn without_feedback(mut self) -> Self {
        self.rho_yy = 0.0;
        for c in &mut self.covariates {
            c.rho_xy = 0.0;
            c.rho_yx = 0.0;
            if c.tdc != TdcType::TimeIndependent {
                c.tdc = TdcType::TypeI;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.subjects == 0 || self.times == 0 {
            return bad("subjects and times must be positive".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        let expected = match self.family {
            ResponseFamily::Binary => Link::Logit,
            ResponseFamily::Continuous => Link::Identity,
        };
        if self.link != expected {
            return Err(Error::LinkFamilyMismatch);
        }
        if self.lag == 0 {
            return bad("feedback lag must be at least 1".into());
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive".into());
        }
        if !(self.binary_clamp > 0.0 && self.binary_clamp < 0.5) {
            return bad("binary clamp must lie in (0, 0.5)".into());
        }
        if !self.intercept.is_finite() || !self.rho_yy.is_finite() {
            return bad("intercept and rho_yy must be finite".into());
        }
        for (n, c) in self.covariates.iter().enumerate() {
            if self.covariates[..n].iter().any(|o| o.name == c.name) {
                return bad(format!("duplicate covariate `{}`", c.name));
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return bad(format!("sigma of `{}` must be positive", c.name));
            }
            if ![c.beta, c.rho_xy, c.rho_yx].iter().all(|v| v.is_finite()) {
                return bad(format!("parameters of `{}` must be finite", c.name));
            }
            let xy_allowed = !matches!(c.tdc, TdcType::TypeI | TdcType::TimeIndependent);
            let yx_allowed = matches!(c.tdc, TdcType::TypeIII | TdcType::TypeIV);
            if c.rho_xy != 0.0 && !xy_allowed {
                return bad(format!(
                    "`{}` is {} and cannot carry covariate-to-response feedback",
                    c.name, c.tdc
                ));
            }
            if c.rho_yx != 0.0 && !yx_allowed {
                return bad(format!(
                    "`{}` is {} and cannot carry response-to-covariate feedback",
                    c.name, c.tdc
                ));
            }
        }
        Ok(())
    }

    pub fn covariate_spec(&self, name: &str) -> Option<CovariateSpec> {
        self.covariates
            .iter()
            .find(|c| c.name == name)
            .map(|c| CovariateSpec::new(c.name.clone(), c.tdc))
    }

    /// Model over the named covariates with the configured types.
    pub fn model(&self, names: &[&str]) -> Result<ModelSpec> {
        let covs = names
            .iter()
            .map(|n| {
                self.covariate_spec(n)
                    .ok_or_else(|| Error::MissingCovariate((*n).to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSpec::new(covs, self.link))
    }

    /// Data-generating coefficients restricted to `model`: the intercept and
    /// each covariate's `beta` (zero when it is not in the response mean).
    pub fn true_beta(&self, model: &ModelSpec) -> Result<DVector<f64>> {
        let mut out = Vec::with_capacity(model.k());
        if model.intercept {
            out.push(self.intercept);
        }
        for spec in &model.covariates {
            let c = self
                .covariates
                .iter()
                .find(|c| c.name == spec.name)
                .ok_or_else(|| Error::MissingCovariate(spec.name.clone()))?;
            out.push(if c.in_response { c.beta } else { 0.0 });
        }
        Ok(DVector::from_vec(out))
    }

    /// The five scenario models: truth, two underfits, two overfits.
    pub fn scenario_models(&self) -> Result<Vec<Candidate>> {
        let sets: [(&str, &[&str]); 5] = [
            ("M0", &["x1", "x2", "x3"]),
            ("MU1", &["x1", "x3"]),
            ("MU2", &["x1", "x2"]),
            ("MO1", &["x1", "x2", "x3", "x4"]),
            ("MO2", &["x1", "x2", "x3", "x5"]),
        ];
        sets.iter()
            .map(|(id, names)| {
                Ok(Candidate {
                    id: (*id).to_string(),
                    model: self.model(names)?,
                })
            })
            .collect()
    }
}

/// `logit(Phi(u))` with `u` clamped to `±NORMAL_SCORE_CLAMP`.
pub fn logit_normal_cdf(u: f64) -> f64 {
    let u = u.clamp(-NORMAL_SCORE_CLAMP, NORMAL_SCORE_CLAMP);
    let ln_upper = (0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)).ln();
    let ln_lower = (0.5 * libm::erfc(u / std::f64::consts::SQRT_2)).ln();
    ln_upper - ln_lower
}

fn response_score(config: &SimulationConfig, y: f64) -> f64 {
    match config.family {
        ResponseFamily::Continuous => logit_normal_cdf((y - config.intercept) / config.sigma0),
        ResponseFamily::Binary => {
            let cdf = if y >= 0.5 {
                1.0
            } else {
                1.0 - logistic(config.intercept)
            };
            logit(cdf.clamp(config.binary_clamp, 1.0 - config.binary_clamp))
        }
    }
}

fn draw_response(config: &SimulationConfig, eta: f64, rng: &mut RngStream) -> f64 {
    match config.family {
        ResponseFamily::Continuous => eta + config.sigma0 * rng.sample::<f64, _>(StandardNormal),
        ResponseFamily::Binary => {
            if rng.random::<f64>() < logistic(eta) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// One balanced `I x T` panel; replicate `r` always yields the same panel.
pub fn generate_panel(config: &SimulationConfig, replicate: u64) -> Result<PanelDataset> {
    config.validate()?;
    let mut rng = rng_stream(config.seed, replicate);
    let (n, t_max, p) = (config.subjects, config.times, config.covariates.len());
    let mut y = DMatrix::zeros(n, t_max);
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, t_max); p];
    // history[0] is time 0; entries t = 1..T are the kept panel
    let mut xs = vec![vec![0.0; t_max + 1]; p];
    let mut zs = vec![0.0; t_max + 1];
    for i in 0..n {
        let mut eta0 = config.intercept;
        for (k, c) in config.covariates.iter().enumerate() {
            xs[k][0] = c.sigma * rng.sample::<f64, _>(StandardNormal);
            if c.in_response {
                eta0 += c.beta * xs[k][0];
            }
        }
        zs[0] = response_score(config, draw_response(config, eta0, &mut rng));
        for t in 1..=t_max {
            let mut eta = config.intercept;
            for (k, c) in config.covariates.iter().enumerate() {
                xs[k][t] = if c.tdc == TdcType::TimeIndependent {
                    xs[k][0]
                } else {
                    c.rho_yx * zs[t - 1] + c.sigma * rng.sample::<f64, _>(StandardNormal)
                };
                if c.in_response {
                    eta += c.beta * xs[k][t];
                }
            }
            for l in 1..=config.lag.min(t) {
                eta += config.rho_yy * zs[t - l];
                for (k, c) in config.covariates.iter().enumerate() {
                    if c.rho_xy != 0.0 {
                        eta += c.rho_xy * logit_normal_cdf(xs[k][t - l] / c.sigma);
                    }
                }
            }
            let yt = draw_response(config, eta, &mut rng);
            zs[t] = response_score(config, yt);
            y[(i, t - 1)] = yt;
            for k in 0..p {
                x[k][(i, t - 1)] = xs[k][t];
            }
        }
    }
    let covariates = config
        .covariates
        .iter()
        .zip(x)
        .map(|(c, values)| CovariateColumn {
            name: c.name.clone(),
            values,
            time_independent: c.tdc == TdcType::TimeIndependent,
        })
        .collect();
    PanelDataset::new(config.family, y, covariates)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    /// 1-based covariate time.
    pub s: usize,
    /// 1-based residual time.
    pub t: usize,
    pub mean: f64,
    pub standard_error: f64,
    pub violated: bool,
}

/// Subject means of `d mu_is / d beta_param * (y_it - mu_it)` at `beta` for
/// every `(s, t)`, flagged when more than three standard errors from zero.
pub fn empirical_type_check(
    dataset: &PanelDataset,
    model: &ModelSpec,
    beta: &DVector<f64>,
    param: usize,
) -> Result<Vec<PairCheck>> {
    let design = crate::data::Design::new(model, dataset)?;
    if beta.len() != model.k() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, model has {} parameters",
            beta.len(),
            model.k()
        )));
    }
    if param >= model.k() {
        return Err(Error::DimensionMismatch(format!(
            "parameter {param} out of range"
        )));
    }
    let (n, times) = (dataset.subjects(), dataset.times());
    let y = dataset.response();
    let mut out = Vec::with_capacity(times * times);
    for s in 0..times {
        for t in 0..times {
            let products: Vec<f64> = (0..n)
                .map(|i| {
                    design.mean_derivative(beta, i, s, param)
                        * (y[(i, t)] - design.mean_response(beta, i, t))
                })
                .collect();
            let mean = products.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                products.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let standard_error = (var / n as f64).sqrt();
            out.push(PairCheck {
                s: s + 1,
                t: t + 1,
                mean,
                standard_error,
                violated: mean.abs() > 3.0 * standard_error,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: u64,
    /// Per model, in candidate order; `None` for a failed fit.
    pub fit_terms: Vec<Option<f64>>,
    pub gmm_converged: Vec<bool>,
    pub failures: Vec<Option<String>>,
    /// Winners when every model produced a fit term.
    pub mppp_winner: Option<String>,
    pub lp_winner: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub covariates: Vec<String>,
    pub k: usize,
    pub j: usize,
    pub n_obs: usize,
    /// Replicates in which this model produced a fit term.
    pub successes: usize,
    pub hull_failures: usize,
    pub tilt_nonconverged: usize,
    pub saturated_fits: usize,
    pub other_failures: usize,
    /// Fits whose GMM stage missed the gradient tolerance (still used).
    pub gmm_nonconverged: usize,
    pub mppp_penalty: f64,
    pub lp_penalty: f64,
    /// Means over complete replicates; `None` when there are none.
    pub mean_fit_term: Option<f64>,
    pub mean_mppp_klic: Option<f64>,
    pub mean_lp_klic: Option<f64>,
    pub mppp_selection_frequency: f64,
    pub lp_selection_frequency: f64,
}

impl ModelSummary {
    pub fn failures(&self) -> usize {
        self.hull_failures + self.tilt_nonconverged + self.saturated_fits + self.other_failures
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: SimulationConfig,
    pub penalty: PenaltyConfig,
    pub models: Vec<ModelSummary>,
    /// Replicates in which every model produced a fit term. Means and
    /// selection frequencies are taken over these only.
    pub complete_replicates: usize,
    /// Model with the smallest mean criterion (`None` without complete
    /// replicates).
    pub mppp_winner: Option<String>,
    pub lp_winner: Option<String>,
    pub replicates: Vec<ReplicateRecord>,
}

impl ScenarioReport {
    pub fn model(&self, id: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.id == id)
    }
}

fn run_replicate(
    config: &SimulationConfig,
    candidates: &[Candidate],
    penalty: &PenaltyConfig,
    settings: &OptimizerSettings,
    index: u64,
) -> Result<ReplicateRecord> {
    let panel = generate_panel(config, index)?;
    let mut fit_terms = Vec::with_capacity(candidates.len());
    let mut gmm_converged = Vec::with_capacity(candidates.len());
    let mut failures = Vec::with_capacity(candidates.len());
    for c in candidates {
        let eval = evaluate_model(&panel, &c.model, settings)?;
        fit_terms.push(eval.fit_term);
        gmm_converged.push(eval.gmm_converged());
        failures.push(eval.failure.clone());
    }
    let n_obs = panel.n_obs();
    let winner = |value: &dyn Fn(&Candidate, f64) -> f64| -> Option<String> {
        let mut best: Option<(f64, usize, &Candidate)> = None;
        for (c, f) in candidates.iter().zip(&fit_terms) {
            let v = value(c, (*f)?);
            let kj = c.model.k() * crate::moments::count_moment_conditions(&c.model, config.times);
            if best.is_none_or(|(bv, bkj, bc)| (v, kj, &c.id) < (bv, bkj, &bc.id)) {
                best = Some((v, kj, c));
            }
        }
        best.map(|(_, _, c)| c.id.clone())
    };
    let kj = |c: &Candidate| {
        (
            c.model.k(),
            crate::moments::count_moment_conditions(&c.model, config.times),
        )
    };
    let mppp_winner = winner(&|c, f| {
        let (k, j) = kj(c);
        f + mppp_penalty(k, j, penalty.c_mppp)
    });
    let lp_winner = winner(&|c, f| {
        let (k, j) = kj(c);
        f + lp_penalty(k, j, n_obs, penalty.c_lp)
    });
    Ok(ReplicateRecord {
        index,
        fit_terms,
        gmm_converged,
        failures,
        mppp_winner,
        lp_winner,
    })
}

/// Generate, fit and penalize every candidate over `config.replicates`
/// panels. Replicates run in parallel (on `workers` threads when given,
/// otherwise the global pool); results are reduced in replicate order.
pub fn run_scenario(
    config: &SimulationConfig,
    candidates: &[Candidate],
    penalty: &PenaltyConfig,
    settings: &OptimizerSettings,
    workers: Option<usize>,
) -> Result<ScenarioReport> {
    config.validate()?;
    penalty.validate()?;
    settings.validate()?;
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list".into()));
    }
    let work = || -> Result<Vec<ReplicateRecord>> {
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| run_replicate(config, candidates, penalty, settings, r))
            .collect()
    };
    let records = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let n_obs = config.subjects * config.times;
    let complete: Vec<&ReplicateRecord> = records
        .iter()
        .filter(|r| r.fit_terms.iter().all(Option::is_some))
        .collect();
    let mut models = Vec::with_capacity(candidates.len());
    for (m, c) in candidates.iter().enumerate() {
        let k = c.model.k();
        let j = crate::moments::count_moment_conditions(&c.model, config.times);
        let successes = records.iter().filter(|r| r.fit_terms[m].is_some()).count();
        if successes == 0 {
            return Err(Error::AllCandidatesFailed(format!(
                "model {} failed in every replicate",
                c.id
            )));
        }
        let (mut hull, mut tilt, mut saturated, mut other) = (0, 0, 0, 0);
        for msg in records.iter().filter_map(|r| r.failures[m].as_ref()) {
            if *msg == Error::HullFailure.to_string() {
                hull += 1;
            } else if *msg == Error::TiltNotConverged.to_string() {
                tilt += 1;
            } else if *msg == Error::SaturatedFit.to_string() {
                saturated += 1;
            } else {
                other += 1;
            }
        }
        let mppp = mppp_penalty(k, j, penalty.c_mppp);
        let lp = lp_penalty(k, j, n_obs, penalty.c_lp);
        let mean_fit = (!complete.is_empty()).then(|| {
            complete
                .iter()
                .map(|r| r.fit_terms[m].unwrap())
                .sum::<f64>()
                / complete.len() as f64
        });
        let freq = |pick: &dyn Fn(&ReplicateRecord) -> &Option<String>| {
            if complete.is_empty() {
                0.0
            } else {
                complete
                    .iter()
                    .filter(|r| pick(r).as_deref() == Some(c.id.as_str()))
                    .count() as f64
                    / complete.len() as f64
            }
        };
        models.push(ModelSummary {
            id: c.id.clone(),
            covariates: c
                .model
                .covariate_names()
                .into_iter()
                .map(String::from)
                .collect(),
            k,
            j,
            n_obs,
            successes,
            hull_failures: hull,
            tilt_nonconverged: tilt,
            saturated_fits: saturated,
            other_failures: other,
            gmm_nonconverged: records
                .iter()
                .filter(|r| r.fit_terms[m].is_some() && !r.gmm_converged[m])
                .count(),
            mppp_penalty: mppp,
            lp_penalty: lp,
            mean_fit_term: mean_fit,
            mean_mppp_klic: mean_fit.map(|f| f + mppp),
            mean_lp_klic: mean_fit.map(|f| f + lp),
            mppp_selection_frequency: freq(&|r| &r.mppp_winner),
            lp_selection_frequency: freq(&|r| &r.lp_winner),
        });
    }
    let argmin = |value: &dyn Fn(&ModelSummary) -> Option<f64>| {
        models
            .iter()
            .filter_map(|m| value(m).map(|v| (v, m)))
            .min_by(|(va, a), (vb, b)| {
                va.partial_cmp(vb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then((a.k * a.j).cmp(&(b.k * b.j)))
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|(_, m)| m.id.clone())
    };
    let mppp_winner = argmin(&|m| m.mean_mppp_klic);
    let lp_winner = argmin(&|m| m.mean_lp_klic);
    Ok(ScenarioReport {
        config: config.clone(),
        penalty: *penalty,
        complete_replicates: complete.len(),
        models,
        mppp_winner,
        lp_winner,
        replicates: records,
    })
}
