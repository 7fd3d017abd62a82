//! Unconstrained minimization: BFGS for general smooth objectives and a
//! damped Newton method for convex objectives with a cheap Hessian. Both use
//! the same Armijo backtracking line search and the same stopping rules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::solve_pd;
use crate::error::{Error, Result};

const MAX_BACKTRACKS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Converged when the gradient's infinity norm falls to this value.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Step multiplier applied on each backtrack.
    pub contraction: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    /// Iterates with a larger Euclidean norm are reported as diverged.
    pub divergence_bound: f64,
    /// Longest trial step (Euclidean norm) for BFGS; unbounded when absent.
    pub max_step: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            max_iterations: 500,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            divergence_bound: 1e6,
            max_step: None,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gradient_tolerance > 0.0) {
            return bad("gradient tolerance must be positive");
        }
        if self.max_iterations < 1 {
            return bad("max iterations must be at least 1");
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad("line-search contraction must lie in (0, 1)");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return bad("sufficient-decrease constant must lie in (0, 1)");
        }
        if !(self.divergence_bound > 0.0) {
            return bad("divergence bound must be positive");
        }
        if self.max_step.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return bad("maximum step must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerStatus {
    Converged,
    /// Iterate norm exceeded the divergence bound.
    Diverged,
    MaxIter,
    /// No descent step could be found before the gradient tolerance was met
    /// (typically rounding-limited).
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub status: OptimizerStatus,
    /// Largest ridge used while solving for Newton directions (0 for BFGS).
    pub max_ridge: f64,
}

impl Minimum {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.amax()
    }

    pub fn converged(&self) -> bool {
        self.status == OptimizerStatus::Converged
    }
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

fn finite(f: f64, g: &DVector<f64>) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

/// Relative slack on the objective for the approximate-Wolfe test.
const APPROX_SLACK: f64 = 1e-10;

/// Backtracking search along `d`; returns the accepted point and step.
///
/// A trial point is accepted on the Armijo condition, or, once objective
/// differences are lost in rounding, on the approximate Wolfe conditions:
/// the objective has not risen beyond a relative slack (nor above `ceiling`)
/// and the directional derivative has shrunk in magnitude. The gradient stays
/// accurate long after objective differences stop being resolvable.
fn line_search<F>(
    eval: &mut F,
    at: &Point,
    d: &DVector<f64>,
    ceiling: f64,
    settings: &OptimizerSettings,
) -> Option<(Point, f64)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let slope = at.g.dot(d);
    let slack = APPROX_SLACK * at.f.abs().max(f64::MIN_POSITIVE);
    let mut t = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let x = &at.x + d * t;
        let (f, g) = eval(&x);
        if finite(f, &g) {
            let armijo = f <= at.f + settings.sufficient_decrease * t * slope;
            let new_slope = g.dot(d);
            let approx = f <= at.f + slack
                && f <= ceiling
                && new_slope >= 0.9 * slope
                && new_slope <= -0.8 * slope;
            if armijo || approx {
                return Some((Point { x, f, g }, t));
            }
        }
        t *= settings.contraction;
    }
    None
}

fn finish(p: Point, iterations: usize, status: OptimizerStatus, max_ridge: f64) -> Minimum {
    Minimum {
        x: p.x,
        value: p.f,
        gradient: p.g,
        iterations,
        status,
        max_ridge,
    }
}

fn start<F>(eval: &mut F, x0: &DVector<f64>, settings: &OptimizerSettings) -> Result<Point>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    settings.validate()?;
    let (f, g) = eval(x0);
    if g.len() != x0.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has length {}, point has length {}",
            g.len(),
            x0.len()
        )));
    }
    if !finite(f, &g) || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStart);
    }
    Ok(Point {
        x: x0.clone(),
        f,
        g,
    })
}

/// BFGS with backtracking. `objective` returns the value and its analytic
/// gradient.
pub fn minimize<F>(objective: F, x0: &DVector<f64>, settings: &OptimizerSettings) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    minimize_from(objective, x0, None, settings)
}

/// BFGS started from the inverse-Hessian approximation `h0` (identity when
/// absent). Resets after a failed search return to `h0`.
pub fn minimize_from<F>(
    mut objective: F,
    x0: &DVector<f64>,
    h0: Option<&DMatrix<f64>>,
    settings: &OptimizerSettings,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut cur = start(&mut objective, x0, settings)?;
    let n = x0.len();
    let initial = match h0 {
        Some(h) if h.shape() == (n, n) => h.clone(),
        Some(h) => {
            return Err(Error::DimensionMismatch(format!(
                "initial inverse Hessian is {}x{}, point has length {n}",
                h.nrows(),
                h.ncols()
            )))
        }
        None => DMatrix::<f64>::identity(n, n),
    };
    let ceiling = cur.f;
    let mut h = initial.clone();
    let mut h_is_initial = true;
    let mut scaled = h0.is_some();

    for iter in 0..settings.max_iterations {
        if cur.g.amax() <= settings.gradient_tolerance {
            return Ok(finish(cur, iter, OptimizerStatus::Converged, 0.0));
        }
        if cur.x.norm() > settings.divergence_bound {
            return Ok(finish(cur, iter, OptimizerStatus::Diverged, 0.0));
        }

        let mut d = -(&h * &cur.g);
        if cur.g.dot(&d) >= 0.0 {
            h.copy_from(&initial);
            h_is_initial = true;
            d = -(&h * &cur.g);
            if cur.g.dot(&d) >= 0.0 {
                d = -cur.g.clone();
            }
        }
        if let Some(cap) = settings.max_step {
            let len = d.norm();
            if len > cap {
                d *= cap / len;
            }
        }

        let (next, step) = match line_search(&mut objective, &cur, &d, ceiling, settings) {
            Some(found) => found,
            None if !h_is_initial => {
                h.copy_from(&initial);
                h_is_initial = true;
                continue;
            }
            None => return Ok(finish(cur, iter, OptimizerStatus::Stalled, 0.0)),
        };

        let s = &next.x - &cur.x;
        let y = &next.g - &cur.g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                h *= sy / y.dot(&y);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h_is_initial = false;
        } else if step == 1.0 {
            // no usable curvature along a full step: lengthen future steps
            h *= 2.0;
            h_is_initial = false;
        }
        cur = next;
    }

    let status = if cur.g.amax() <= settings.gradient_tolerance {
        OptimizerStatus::Converged
    } else if cur.x.norm() > settings.divergence_bound {
        OptimizerStatus::Diverged
    } else {
        OptimizerStatus::MaxIter
    };
    Ok(finish(cur, settings.max_iterations, status, 0.0))
}

/// Damped Newton for convex objectives. `objective` returns value, gradient
/// and Hessian; singular Hessians are regularized through the ridge ladder.
pub fn newton_minimize<F>(
    objective: F,
    x0: &DVector<f64>,
    settings: &OptimizerSettings,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
{
    newton_minimize_with(objective, x0, settings, |_| false)
}

/// [`newton_minimize`] with a caller-supplied certificate of unboundedness:
/// as soon as `unbounded(x)` holds at an iterate the run stops as
/// [`OptimizerStatus::Diverged`] instead of walking out to the divergence
/// bound.
pub fn newton_minimize_with<F, U>(
    mut objective: F,
    x0: &DVector<f64>,
    settings: &OptimizerSettings,
    unbounded: U,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
    U: Fn(&DVector<f64>) -> bool,
{
    let mut hessian = DMatrix::zeros(0, 0);
    let mut value_grad = |x: &DVector<f64>, keep: &mut DMatrix<f64>| {
        let (f, g, h) = objective(x);
        *keep = h;
        (f, g)
    };
    let mut cur = {
        let mut first = |x: &DVector<f64>| value_grad(x, &mut hessian);
        start(&mut first, x0, settings)?
    };
    let mut cur_h = hessian.clone();
    let mut max_ridge = 0.0_f64;
    let ceiling = cur.f;

    for iter in 0..settings.max_iterations {
        if cur.g.amax() <= settings.gradient_tolerance {
            return Ok(finish(cur, iter, OptimizerStatus::Converged, max_ridge));
        }
        if cur.x.norm() > settings.divergence_bound || unbounded(&cur.x) {
            return Ok(finish(cur, iter, OptimizerStatus::Diverged, max_ridge));
        }

        let fallback = || -&cur.g / cur.g.norm() * cur.x.norm().max(1.0);
        let newton = solve_pd(&cur_h, &(-&cur.g)).ok().and_then(|sol| {
            (cur.g.dot(&sol.x) < 0.0 && sol.x.iter().all(|v| v.is_finite())).then_some(sol)
        });
        let (d, used_newton) = match newton {
            Some(sol) => {
                max_ridge = max_ridge.max(sol.ridge);
                (sol.x, true)
            }
            None => (fallback(), false),
        };

        let mut searcher = |x: &DVector<f64>| value_grad(x, &mut hessian);
        let found = match line_search(&mut searcher, &cur, &d, ceiling, settings) {
            Some(found) => Some(found),
            None if used_newton => {
                let d = fallback();
                line_search(&mut searcher, &cur, &d, ceiling, settings)
            }
            None => None,
        };
        match found {
            Some((next, _)) => {
                cur = next;
                cur_h = hessian.clone();
            }
            None => return Ok(finish(cur, iter, OptimizerStatus::Stalled, max_ridge)),
        }
    }

    let status = if cur.g.amax() <= settings.gradient_tolerance {
        OptimizerStatus::Converged
    } else if cur.x.norm() > settings.divergence_bound {
        OptimizerStatus::Diverged
    } else {
        OptimizerStatus::MaxIter
    };
    Ok(finish(cur, settings.max_iterations, status, max_ridge))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn quadratic_bowl() {
        let m = minimize(
            |x| (x.norm_squared(), x * 2.0),
            &v(&[3.0, 4.0]),
            &OptimizerSettings::default(),
        )
        .unwrap();
        assert!(m.converged());
        assert!(m.x.amax() < 1e-8);
        assert!(m.value < 1e-15);
    }

    #[test]
    fn linear_objective_diverges() {
        let m = minimize(
            |x| (x[0], v(&[1.0])),
            &v(&[0.0]),
            &OptimizerSettings::default(),
        )
        .unwrap();
        assert_eq!(m.status, OptimizerStatus::Diverged);
    }

    fn three_point(x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let g = x[0];
        let (a, b, c) = ((-g).exp(), 1.0, (2.0 * g).exp());
        let f = (a + b + c) / 3.0;
        let df = (-a + 2.0 * c) / 3.0;
        let d2 = (a + 4.0 * c) / 3.0;
        (f, v(&[df]), DMatrix::from_element(1, 1, d2))
    }

    #[test]
    fn three_point_exponential_matches_grid() {
        // grid oracle over [-2, 2] with step 1e-5
        let mut best = (f64::INFINITY, 0.0);
        let mut i = 0;
        while i <= 400_000 {
            let g = -2.0 + i as f64 * 1e-5;
            let f = ((-g).exp() + 1.0 + (2.0 * g).exp()) / 3.0;
            if f < best.0 {
                best = (f, g);
            }
            i += 1;
        }
        let closed = -(2.0_f64.ln()) / 3.0;
        assert!((best.1 - closed).abs() < 2e-5);

        let bfgs = minimize(
            |x| {
                let (f, g, _) = three_point(x);
                (f, g)
            },
            &v(&[0.0]),
            &OptimizerSettings::default(),
        )
        .unwrap();
        assert!(bfgs.converged());
        assert!((bfgs.x[0] - closed).abs() < 1e-7);
        assert!((bfgs.value - best.0).abs() < 1e-9);
        assert!((bfgs.value - 0.963294).abs() < 5e-6);

        let newton =
            newton_minimize(three_point, &v(&[0.0]), &OptimizerSettings::default()).unwrap();
        assert!(newton.converged());
        assert!((newton.x[0] - closed).abs() < 1e-9);
    }

    #[test]
    fn never_worse_than_start() {
        // Rosenbrock from a handful of starts
        let rosen = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = v(&[
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        };
        for start in [[-1.2, 1.0], [0.0, 0.0], [2.0, -1.0], [5.0, 5.0]] {
            let x0 = v(&start);
            let f0 = rosen(&x0).0;
            let m = minimize(rosen, &x0, &OptimizerSettings::default()).unwrap();
            assert!(m.value <= f0);
            assert!(m.converged(), "start {start:?}: {:?}", m.status);
            assert!((m.x[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let f = |x: &DVector<f64>| {
            (
                (x[0] - 1.0).powi(4) + x[1] * x[1],
                v(&[4.0 * (x[0] - 1.0).powi(3), 2.0 * x[1]]),
            )
        };
        let a = minimize(f, &v(&[3.0, 2.0]), &OptimizerSettings::default()).unwrap();
        let b = minimize(f, &v(&[3.0, 2.0]), &OptimizerSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = minimize(
            |x| (f64::NAN, x.clone()),
            &v(&[1.0]),
            &OptimizerSettings::default(),
        );
        assert_eq!(r.unwrap_err(), Error::NonFiniteStart);
    }

    #[test]
    fn settings_validation() {
        let mut s = OptimizerSettings::default();
        s.contraction = 1.0;
        assert!(s.validate().is_err());
        s = OptimizerSettings::default();
        s.max_iterations = 0;
        assert!(s.validate().is_err());
    }
}
