//! Regularized symmetric positive-definite solves.
//!
//! Moment covariance matrices built from duplicated or all-zero moment
//! conditions are exactly singular, so every solve goes through a ridge
//! ladder: the plain factorization is tried first, then `A + λI` with
//! `λ = 1e-8 · trace(A)/dim`, growing tenfold up to `1e-2 · trace(A)/dim`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First rung of the ridge ladder, relative to `trace(A)/dim`.
pub const RIDGE_START: f64 = 1e-8;
/// Last rung of the ridge ladder, relative to `trace(A)/dim`.
pub const RIDGE_MAX: f64 = 1e-2;
/// Squared Cholesky pivots below this fraction of the largest diagonal entry
/// are treated as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-12;

/// Cholesky factor of `A + ridge·I`.
#[derive(Clone, Debug)]
pub struct RegularizedCholesky {
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    ridge: f64,
}

impl RegularizedCholesky {
    fn new(chol: Cholesky<f64, Dyn>, ridge: f64) -> Self {
        Self {
            l: chol.l(),
            chol,
            ridge,
        }
    }

    /// Ridge actually added to the diagonal (0 when `A` itself factored).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "rhs has length {}, matrix is {}x{}",
                b.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(self.chol.solve(b))
    }

    /// `L^{-1} B` for the lower factor `L`, so that `B' (A + ridge·I)^{-1} B`
    /// equals `(L^{-1} B)' (L^{-1} B)` without forming the inverse.
    pub fn whiten(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} rows, matrix is {}x{}",
                b.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(self
            .l
            .solve_lower_triangular(b)
            .expect("pivots are bounded away from zero"))
    }

    /// Inverse of `A + ridge·I`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }
}

/// Result of [`solve_pd`].
#[derive(Clone, Debug, PartialEq)]
pub struct PdSolution {
    pub x: DVector<f64>,
    pub ridge: f64,
}

fn try_factor(a: &DMatrix<f64>, ridge: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += ridge;
    }
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    let chol = Cholesky::new(m)?;
    let l = chol.l_dirty();
    let ok = (0..n).all(|i| {
        let p = l[(i, i)];
        p.is_finite() && p * p >= PIVOT_FLOOR * max_diag
    });
    ok.then_some(chol)
}

/// Factor a symmetric matrix, adding the smallest ridge on the ladder that
/// makes it numerically positive definite.
pub fn factor_pd(a: &DMatrix<f64>) -> Result<RegularizedCholesky> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Empty("matrix".into()));
    }
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    if let Some(chol) = try_factor(a, 0.0) {
        return Ok(RegularizedCholesky::new(chol, 0.0));
    }
    let scale = a.trace() / n as f64;
    if !(scale > 0.0) {
        return Err(Error::SingularAfterJitter { ridge: 0.0 });
    }
    let mut rel = RIDGE_START;
    let mut last = 0.0;
    while rel <= RIDGE_MAX * (1.0 + 1e-9) {
        let ridge = rel * scale;
        if let Some(chol) = try_factor(a, ridge) {
            return Ok(RegularizedCholesky::new(chol, ridge));
        }
        last = ridge;
        rel *= 10.0;
    }
    Err(Error::SingularAfterJitter { ridge: last })
}

/// Solve `(A + λI)x = b` for symmetric `A`; `λ` is reported in the result.
pub fn solve_pd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<PdSolution> {
    if b.len() != a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has length {}, matrix has {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("right-hand side".into()));
    }
    let f = factor_pd(a)?;
    let x = f.solve(b)?;
    Ok(PdSolution { x, ridge: f.ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(a: &DMatrix<f64>, s: &PdSolution, b: &DVector<f64>) -> f64 {
        let n = a.nrows();
        let shifted = a + DMatrix::identity(n, n) * s.ridge;
        (shifted * &s.x - b).amax()
    }

    #[test]
    fn identity_and_diagonal() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let s = solve_pd(&a, &b).unwrap();
        assert_eq!(s.ridge, 0.0);
        assert!((s.x.clone() - &b).amax() < 1e-15);

        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let b = DVector::from_vec(vec![8.0, 27.0]);
        let s = solve_pd(&a, &b).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-14 && (s.x[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn whitened_quadratic_form_matches_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let f = factor_pd(&a).unwrap();
        let e = f.whiten(&b).unwrap();
        let direct = b.transpose() * f.inverse() * &b;
        assert!((e.transpose() * e - direct).amax() < 1e-12);
        assert!(f.whiten(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn singular_matrix_gets_ridge() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let s = solve_pd(&a, &b).unwrap();
        assert!(s.ridge > 0.0);
        assert!(s.x.iter().all(|v| v.is_finite()));
        assert!(residual(&a, &s, &b) <= 1e-10 * (1.0 + b.amax()));
    }

    #[test]
    fn zero_matrix_is_singular() {
        let a = DMatrix::zeros(3, 3);
        let b = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            solve_pd(&a, &b),
            Err(Error::SingularAfterJitter { .. })
        ));
    }

    #[test]
    fn indefinite_beyond_ladder_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            solve_pd(&a, &b),
            Err(Error::SingularAfterJitter { .. })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(solve_pd(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn duplicated_rows_stay_accurate() {
        // rank-2 Gram matrix with an exactly duplicated coordinate
        let g = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 1.0, 0.5, -2.0, -2.0, 1.0, 0.3, 0.3, -1.0, 0.7, 0.7, 2.0,
            ],
        );
        let a = g.transpose() * &g;
        let b = DVector::from_vec(vec![1.0, 1.0, -0.5]);
        let s = solve_pd(&a, &b).unwrap();
        assert!(s.ridge > 0.0);
        assert!(residual(&a, &s, &b) <= 1e-10 * (1.0 + b.amax()));
        // the null direction e0 - e1 receives no mass
        assert!((s.x[0] - s.x[1]).abs() < 1e-6);
    }
}
