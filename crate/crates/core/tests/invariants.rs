use nalgebra::{DMatrix, DVector};
use pklic::moments::pair_count;
use pklic::numerics::{log_mean_exp, softmax, OptimizerSettings};
use pklic::selection::{sensitivity_sweep, Criterion, FitTermEntry};
use pklic::tilt::{fit_gamma, lp_penalty, mppp_penalty, tilt_objective, TiltStatus};
use pklic::{enumerate_valid_pairs, TdcType};
use proptest::prelude::*;

const TYPES: [TdcType; 4] = [
    TdcType::TypeI,
    TdcType::TypeII,
    TdcType::TypeIII,
    TdcType::TypeIV,
];

proptest! {
    #[test]
    fn pair_lists_are_nested(times in 1usize..12) {
        let sets: Vec<Vec<(usize, usize)>> = TYPES.iter().map(|t| enumerate_valid_pairs(*t, times)).collect();
        for (t, pairs) in TYPES.iter().zip(&sets) {
            prop_assert_eq!(pairs.len(), pair_count(*t, times));
        }
        // III is the diagonal; II and IV split the square around it
        for p in &sets[2] {
            prop_assert!(sets[1].contains(p) && sets[3].contains(p));
        }
        prop_assert_eq!(sets[1].len() + sets[3].len(), times * times + times);
    }

    #[test]
    fn penalties_scale(k in 1usize..10, j in 1usize..200, n in 2usize..10_000, c in 0.001f64..1.0) {
        let m = mppp_penalty(k, j, c);
        prop_assert!((m - c * (k * j) as f64).abs() < 1e-9 * (1.0 + m));
        prop_assert!((lp_penalty(k, j, n, c) - m * (n as f64).ln()).abs() < 1e-9 * (1.0 + m));
        prop_assert!(mppp_penalty(k, j + 1, c) > m);
    }

    #[test]
    fn log_mean_exp_bounded(v in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let lme = log_mean_exp(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(lme <= hi + 1e-12 && lme >= lo - 1e-12);
        // Jensen
        prop_assert!(lme >= mean - 1e-12);
        let w = softmax(&v);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_weights_balance_moments(raw in prop::collection::vec(-3.0f64..3.0, 24)) {
        // symmetrize so the origin sits inside the hull
        let half = DMatrix::from_row_slice(12, 2, &raw);
        let g = DMatrix::from_fn(24, 2, |i, c| if i < 12 { half[(i, c)] + 0.3 } else { -half[(i - 12, c)] });
        let fit = fit_gamma(&g, &OptimizerSettings::default()).unwrap();
        if fit.status == TiltStatus::Converged {
            let (value, grad, _) = tilt_objective(&g, &fit.gamma);
            prop_assert!(grad.amax() < 1e-7);
            prop_assert!(value <= 1e-12);
            prop_assert!(fit.deviance >= -1e-12);
            // zero is feasible, so the minimum is no worse than it
            let (at_zero, _, _) = tilt_objective(&g, &DVector::zeros(2));
            prop_assert!(value <= at_zero + 1e-12);
        }
    }

    #[test]
    fn sweep_winner_is_the_minimum(
        fits in prop::collection::vec((-500.0f64..0.0, 1usize..6, 5usize..90), 2..8),
        n in 100usize..5000,
    ) {
        let entries: Vec<FitTermEntry> = fits
            .iter()
            .enumerate()
            .map(|(i, (f, k, j))| FitTermEntry { model_id: format!("m{i}"), fit_term: *f, k: *k, j: *j })
            .collect();
        let rows = sensitivity_sweep(&entries, n, &[0.05, 0.1], &[0.01, 0.02]).unwrap();
        for row in rows {
            let value = |e: &FitTermEntry| match row.criterion {
                Criterion::Mppp => e.fit_term + mppp_penalty(e.k, e.j, row.c),
                Criterion::Lp => e.fit_term + lp_penalty(e.k, e.j, n, row.c),
            };
            let min = entries.iter().map(value).fold(f64::INFINITY, f64::min);
            prop_assert!((row.value - min).abs() < 1e-9);
        }
    }
}
