//! Valid moment conditions for marginal models with time-dependent
//! covariates.
//!
//! Parameter `p` contributes one moment per valid time pair `(s, t)`:
//!
//! ```text
//! g_{i,p,s,t}(beta) = (d mu_is / d beta_p) * (y_it - mu_it)
//! ```
//!
//! Validity depends only on the covariate type: Type I uses every pair,
//! Type II pairs with `s >= t`, Type III the diagonal `s == t`, Type IV pairs
//! with `s <= t`. The intercept and time-independent covariates are counted
//! as Type I.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Design, ModelSpec, PanelDataset, TdcType};
use crate::error::{Error, Result};

/// Valid `(s, t)` pairs (1-based) for a covariate type, lexicographic.
pub fn enumerate_valid_pairs(tdc: TdcType, times: usize) -> Vec<(usize, usize)> {
    let keep = |s: usize, t: usize| match tdc {
        TdcType::TypeI | TdcType::TimeIndependent => true,
        TdcType::TypeII => s >= t,
        TdcType::TypeIII => s == t,
        TdcType::TypeIV => s <= t,
    };
    let mut out = Vec::new();
    for s in 1..=times {
        for t in 1..=times {
            if keep(s, t) {
                out.push((s, t));
            }
        }
    }
    out
}

/// Closed-form pair count for one covariate type.
pub fn pair_count(tdc: TdcType, times: usize) -> usize {
    match tdc {
        TdcType::TypeI | TdcType::TimeIndependent => times * times,
        TdcType::TypeII | TdcType::TypeIV => times * (times + 1) / 2,
        TdcType::TypeIII => times,
    }
}

/// Total number of valid moment conditions `j` for a model.
pub fn count_moment_conditions(model: &ModelSpec, times: usize) -> usize {
    model
        .parameter_types()
        .into_iter()
        .map(|t| pair_count(t, times))
        .sum()
}

/// One stacked moment: parameter index and 0-based time pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentIndex {
    pub param: usize,
    pub s: usize,
    pub t: usize,
}

/// The stacked valid moment conditions of one model at a fixed panel length.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSystem {
    model: ModelSpec,
    times: usize,
    pairs: Vec<Vec<(usize, usize)>>,
    entries: Vec<MomentIndex>,
}

impl MomentSystem {
    pub fn new(model: ModelSpec, times: usize) -> Result<Self> {
        if times == 0 {
            return Err(Error::InvalidConfig(
                "panel length must be at least 1".into(),
            ));
        }
        if model.k() == 0 {
            return Err(Error::InvalidConfig("model has no parameters".into()));
        }
        let pairs: Vec<Vec<(usize, usize)>> = model
            .parameter_types()
            .into_iter()
            .map(|t| enumerate_valid_pairs(t, times))
            .collect();
        let entries = pairs
            .iter()
            .enumerate()
            .flat_map(|(param, list)| {
                list.iter().map(move |&(s, t)| MomentIndex {
                    param,
                    s: s - 1,
                    t: t - 1,
                })
            })
            .collect();
        Ok(Self {
            model,
            times,
            pairs,
            entries,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    /// Total moment dimension.
    pub fn j(&self) -> usize {
        self.entries.len()
    }

    /// Valid 1-based pairs for parameter `p`.
    pub fn pairs(&self, p: usize) -> &[(usize, usize)] {
        &self.pairs[p]
    }

    pub fn entries(&self) -> &[MomentIndex] {
        &self.entries
    }

    /// Attach the system to a dataset with matching panel length.
    pub fn bind<'a>(&'a self, dataset: &'a PanelDataset) -> Result<BoundSystem<'a>> {
        if dataset.times() != self.times {
            return Err(Error::DimensionMismatch(format!(
                "moment system built for T={}, dataset has T={}",
                self.times,
                dataset.times()
            )));
        }
        Ok(BoundSystem {
            system: self,
            design: Design::new(&self.model, dataset)?,
        })
    }
}

/// A moment system evaluated against a particular dataset.
#[derive(Clone, Debug)]
pub struct BoundSystem<'a> {
    system: &'a MomentSystem,
    design: Design<'a>,
}

impl<'a> BoundSystem<'a> {
    pub fn system(&self) -> &MomentSystem {
        self.system
    }

    pub fn design(&self) -> &Design<'a> {
        &self.design
    }

    pub fn subjects(&self) -> usize {
        self.design.dataset().subjects()
    }

    pub fn j(&self) -> usize {
        self.system.j()
    }

    pub fn k(&self) -> usize {
        self.system.k()
    }

    fn check(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "beta has length {}, model has {} parameters",
                beta.len(),
                self.k()
            )));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("beta".into()));
        }
        Ok(())
    }

    fn fill_subject(&self, beta: &DVector<f64>, i: usize, out: &mut [f64]) {
        let terms = self.design.subject_terms(beta, i);
        let y = self.design.dataset().response();
        for (slot, e) in out.iter_mut().zip(&self.system.entries) {
            *slot = terms.deriv[(e.s, e.param)] * (y[(i, e.t)] - terms.mu[e.t]);
        }
    }

    /// Stacked moment vector `g_i(beta)` for subject `i`.
    pub fn moment_vector(&self, beta: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        self.check(beta)?;
        if i >= self.subjects() {
            return Err(Error::DimensionMismatch(format!(
                "subject {i} out of range"
            )));
        }
        let mut g = DVector::zeros(self.j());
        self.fill_subject(beta, i, g.as_mut_slice());
        Ok(g)
    }

    /// All moment vectors, one row per subject.
    pub fn moment_matrix(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(beta)?;
        let (n, j) = (self.subjects(), self.j());
        let mut m = DMatrix::zeros(n, j);
        let mut row = vec![0.0; j];
        for i in 0..n {
            self.fill_subject(beta, i, &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        Ok(m)
    }

    /// Subject mean `G_N` and uncentered second moment `V_N`, both with the
    /// subject count as divisor.
    pub fn mean_and_cov(&self, beta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.moment_matrix(beta)?;
        Ok(mean_and_second_moment(&m))
    }

    pub fn mean(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.moment_matrix(beta)?;
        Ok(column_means(&m))
    }

    /// Moment matrix together with the subject-averaged Jacobian
    /// `dG_N/dbeta` (`j x k`).
    pub fn with_jacobian(&self, beta: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(beta)?;
        let (n, j, k) = (self.subjects(), self.j(), self.k());
        let mut m = DMatrix::zeros(n, j);
        let mut jac = DMatrix::zeros(j, k);
        self.for_each_subject(beta, |i, g, dg| {
            for c in 0..j {
                m[(i, c)] = g[c];
            }
            jac += dg;
        });
        jac /= n as f64;
        Ok((m, jac))
    }

    /// Calls `f(i, g_i, dg_i/dbeta)` for every subject in order.
    pub(crate) fn for_each_subject<F>(&self, beta: &DVector<f64>, mut f: F)
    where
        F: FnMut(usize, &[f64], &DMatrix<f64>),
    {
        let (j, k) = (self.j(), self.k());
        let y = self.design.dataset().response();
        let mut g = vec![0.0; j];
        let mut dg = DMatrix::zeros(j, k);
        for i in 0..self.subjects() {
            let terms = self.design.subject_terms(beta, i);
            for (c, e) in self.system.entries.iter().enumerate() {
                let r = y[(i, e.t)] - terms.mu[e.t];
                let d_sp = terms.deriv[(e.s, e.param)];
                g[c] = d_sp * r;
                let xp = self.design.x(i, e.s, e.param);
                for q in 0..k {
                    let second = xp * self.design.x(i, e.s, q) * terms.curvature[e.s];
                    dg[(c, q)] = second * r - d_sp * terms.deriv[(e.t, q)];
                }
            }
            f(i, &g, &dg);
        }
    }
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Column means and `M'M / n` for a subjects-by-moments matrix.
pub fn mean_and_second_moment(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows() as f64;
    let mean = column_means(m);
    let mut v = m.tr_mul(m) / n;
    // exact symmetry
    for a in 0..v.nrows() {
        for b in 0..a {
            let avg = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = avg;
            v[(b, a)] = avg;
        }
    }
    (mean, v)
}
