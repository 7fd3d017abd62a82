//! Balanced panels, covariate metadata and candidate model specifications.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-dependent covariate classification. Determines which `(s, t)` pairs
/// give valid moment conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TdcType {
    TypeI,
    TypeII,
    TypeIII,
    TypeIV,
    /// Constant within subject; counted like Type I.
    TimeIndependent,
}

impl TdcType {
    pub const ALL: [TdcType; 5] = [
        TdcType::TypeI,
        TdcType::TypeII,
        TdcType::TypeIII,
        TdcType::TypeIV,
        TdcType::TimeIndependent,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TdcType::TypeI => "TypeI",
            TdcType::TypeII => "TypeII",
            TdcType::TypeIII => "TypeIII",
            TdcType::TypeIV => "TypeIV",
            TdcType::TimeIndependent => "TimeIndependent",
        }
    }
}

impl fmt::Display for TdcType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TdcType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TdcType::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown covariate type tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFamily {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => logistic(eta),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub tdc: TdcType,
}

impl CovariateSpec {
    pub fn new(name: impl Into<String>, tdc: TdcType) -> Self {
        Self {
            name: name.into(),
            tdc,
        }
    }
}

/// A candidate marginal model. The intercept, when present, is parameter 0;
/// covariates follow in list order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub covariates: Vec<CovariateSpec>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub link: Link,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(covariates: Vec<CovariateSpec>, link: Link) -> Self {
        Self {
            covariates,
            intercept: true,
            link,
        }
    }

    /// Number of regression parameters.
    pub fn k(&self) -> usize {
        self.covariates.len() + usize::from(self.intercept)
    }

    /// Moment-counting type of each parameter, in parameter order. The
    /// intercept counts as Type I.
    pub fn parameter_types(&self) -> Vec<TdcType> {
        let mut out = Vec::with_capacity(self.k());
        if self.intercept {
            out.push(TdcType::TypeI);
        }
        out.extend(self.covariates.iter().map(|c| c.tdc));
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.k());
        if self.intercept {
            out.push("(intercept)".to_string());
        }
        out.extend(self.covariates.iter().map(|c| c.name.clone()));
        out
    }

    pub fn covariate_names(&self) -> Vec<&str> {
        self.covariates.iter().map(|c| c.name.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateColumn {
    pub name: String,
    /// I x T values; time-independent covariates are replicated across t.
    pub values: DMatrix<f64>,
    pub time_independent: bool,
}

/// Balanced long panel: `subjects` x `times` responses and covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    family: ResponseFamily,
    y: DMatrix<f64>,
    covariates: Vec<CovariateColumn>,
}

impl PanelDataset {
    pub fn new(
        family: ResponseFamily,
        y: DMatrix<f64>,
        covariates: Vec<CovariateColumn>,
    ) -> Result<Self> {
        let (i, t) = y.shape();
        if i == 0 || t == 0 {
            return Err(Error::Empty("panel has no observations".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        if family == ResponseFamily::Binary {
            if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryResponse(*bad));
            }
        }
        for (n, c) in covariates.iter().enumerate() {
            if c.values.shape() != (i, t) {
                return Err(Error::DimensionMismatch(format!(
                    "covariate `{}` is {}x{}, response is {i}x{t}",
                    c.name,
                    c.values.nrows(),
                    c.values.ncols()
                )));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("covariate `{}`", c.name)));
            }
            if covariates[..n].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate covariate `{}`",
                    c.name
                )));
            }
            if c.time_independent {
                for row in c.values.row_iter() {
                    if row.iter().any(|v| *v != row[0]) {
                        return Err(Error::InvalidConfig(format!(
                            "time-independent covariate `{}` varies within a subject",
                            c.name
                        )));
                    }
                }
            }
        }
        Ok(Self {
            family,
            y,
            covariates,
        })
    }

    pub fn subjects(&self) -> usize {
        self.y.nrows()
    }

    pub fn times(&self) -> usize {
        self.y.ncols()
    }

    /// Total observation count `I * T`.
    pub fn n_obs(&self) -> usize {
        self.subjects() * self.times()
    }

    pub fn family(&self) -> ResponseFamily {
        self.family
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn covariates(&self) -> &[CovariateColumn] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateColumn> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn with_response(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(self.family, y, self.covariates.clone())
    }
}

/// A model bound to a dataset: resolves covariate columns once and evaluates
/// means and their derivatives per `(subject, time)`.
#[derive(Clone, Debug)]
pub struct Design<'a> {
    model: &'a ModelSpec,
    dataset: &'a PanelDataset,
    /// `None` marks the intercept column.
    columns: Vec<Option<&'a DMatrix<f64>>>,
}

impl<'a> Design<'a> {
    pub fn new(model: &'a ModelSpec, dataset: &'a PanelDataset) -> Result<Self> {
        if model.k() == 0 {
            return Err(Error::InvalidConfig("model has no parameters".into()));
        }
        if model.link == Link::Logit && dataset.family() != ResponseFamily::Binary {
            return Err(Error::LinkFamilyMismatch);
        }
        let mut columns = Vec::with_capacity(model.k());
        if model.intercept {
            columns.push(None);
        }
        for c in &model.covariates {
            let col = dataset
                .covariate(&c.name)
                .ok_or_else(|| Error::MissingCovariate(c.name.clone()))?;
            columns.push(Some(&col.values));
        }
        Ok(Self {
            model,
            dataset,
            columns,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    pub fn dataset(&self) -> &PanelDataset {
        self.dataset
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    fn check_beta(&self, beta: &DVector<f64>) {
        assert_eq!(beta.len(), self.k(), "beta has wrong length");
    }

    /// Design value `x_{is,p}` (1 for the intercept).
    #[inline]
    pub fn x(&self, i: usize, s: usize, p: usize) -> f64 {
        match self.columns[p] {
            None => 1.0,
            Some(m) => m[(i, s)],
        }
    }

    #[inline]
    pub fn eta(&self, beta: &DVector<f64>, i: usize, s: usize) -> f64 {
        (0..self.k()).map(|p| self.x(i, s, p) * beta[p]).sum()
    }

    /// `mu_is = g^{-1}(eta_is)`.
    pub fn mean_response(&self, beta: &DVector<f64>, i: usize, s: usize) -> f64 {
        self.check_beta(beta);
        self.model.link.inverse(self.eta(beta, i, s))
    }

    /// `d mu_is / d beta_p`.
    pub fn mean_derivative(&self, beta: &DVector<f64>, i: usize, s: usize, p: usize) -> f64 {
        self.check_beta(beta);
        match self.model.link {
            Link::Identity => self.x(i, s, p),
            Link::Logit => {
                let mu = logistic(self.eta(beta, i, s));
                self.x(i, s, p) * mu * (1.0 - mu)
            }
        }
    }

    /// `d^2 mu_is / d beta_p d beta_q`.
    pub fn mean_second_derivative(
        &self,
        beta: &DVector<f64>,
        i: usize,
        s: usize,
        p: usize,
        q: usize,
    ) -> f64 {
        self.check_beta(beta);
        match self.model.link {
            Link::Identity => 0.0,
            Link::Logit => {
                let mu = logistic(self.eta(beta, i, s));
                self.x(i, s, p) * self.x(i, s, q) * mu * (1.0 - mu) * (1.0 - 2.0 * mu)
            }
        }
    }

    /// Means, first derivatives (`T x k`) and second-derivative factors for
    /// one subject. The second derivative is `x_p x_q * curvature[s]`.
    pub(crate) fn subject_terms(&self, beta: &DVector<f64>, i: usize) -> SubjectTerms {
        let t = self.dataset.times();
        let k = self.k();
        let mut mu = vec![0.0; t];
        let mut deriv = DMatrix::zeros(t, k);
        let mut curvature = vec![0.0; t];
        for s in 0..t {
            let eta = self.eta(beta, i, s);
            match self.model.link {
                Link::Identity => {
                    mu[s] = eta;
                    for p in 0..k {
                        deriv[(s, p)] = self.x(i, s, p);
                    }
                }
                Link::Logit => {
                    let m = logistic(eta);
                    let v = m * (1.0 - m);
                    mu[s] = m;
                    curvature[s] = v * (1.0 - 2.0 * m);
                    for p in 0..k {
                        deriv[(s, p)] = self.x(i, s, p) * v;
                    }
                }
            }
        }
        SubjectTerms {
            mu,
            deriv,
            curvature,
        }
    }
}

pub(crate) struct SubjectTerms {
    pub mu: Vec<f64>,
    pub deriv: DMatrix<f64>,
    pub curvature: Vec<f64>,
}
