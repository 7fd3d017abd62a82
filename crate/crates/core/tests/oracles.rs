use nalgebra::{DMatrix, DVector};
use pklic::numerics::{rng_stream, OptimizerSettings};
use pklic::selection::{select_from_fit_terms, Criterion, FitTermEntry};
use pklic::simgen::SimulationConfig;
use pklic::tilt::{fit_gamma, lp_penalty, mppp_penalty, TiltStatus};
use pklic::{
    count_moment_conditions, two_step_gmm, CovariateColumn, CovariateSpec, Link, ModelSpec,
    MomentSystem, PanelDataset, PenaltyConfig, ResponseFamily, TdcType,
};
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn scenario_dimensions_at_five_times() {
    let cfg = SimulationConfig::paper_default(ResponseFamily::Continuous, 100, 5, 1, 1);
    let dims: Vec<(String, usize, usize)> = cfg
        .scenario_models()
        .unwrap()
        .into_iter()
        .map(|c| (c.id, c.model.k(), count_moment_conditions(&c.model, 5)))
        .collect();
    let want = [
        ("M0", 4, 70),
        ("MU1", 3, 55),
        ("MU2", 3, 65),
        ("MO1", 5, 85),
        ("MO2", 5, 75),
    ];
    for ((id, k, j), (wid, wk, wj)) in dims.iter().zip(want) {
        assert_eq!((id.as_str(), *k, *j), (wid, wk, wj));
    }
    assert!((mppp_penalty(4, 70, 0.1) - 28.0).abs() < 1e-12);
}

#[test]
fn closed_form_tilt() {
    let g = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 2.0]);
    let fit = fit_gamma(&g, &OptimizerSettings::default()).unwrap();
    assert_eq!(fit.status, TiltStatus::Converged);
    assert!((fit.gamma[0] + 2f64.ln() / 3.0).abs() < 1e-8);
    // e^{3 gamma} = 1/2 gives mean exp = (2^{1/3} + 1 + 2^{-2/3}) / 3
    let want = (2f64.powf(1.0 / 3.0) + 1.0 + 2f64.powf(-2.0 / 3.0)) / 3.0;
    assert!((fit.klic_objective - want).abs() < 1e-10);
    assert!(fit.deviance > 0.0);
}

#[test]
fn separated_moments_fail_fast() {
    // origin outside the hull: every row has a positive first coordinate
    let mut rng = rng_stream(3, 0);
    let g = DMatrix::from_fn(60, 4, |_, c| {
        if c == 0 {
            0.5 + normal(&mut rng).abs()
        } else {
            normal(&mut rng)
        }
    });
    let fit = fit_gamma(&g, &OptimizerSettings::default()).unwrap();
    assert_eq!(fit.status, TiltStatus::HullFailure);
    assert!(fit.iterations < 50, "took {} iterations", fit.iterations);
}

fn continuous_panel(subjects: usize, times: usize, seed: u64) -> PanelDataset {
    let mut rng = rng_stream(seed, 0);
    let x = DMatrix::from_fn(subjects, times, |_, _| normal(&mut rng));
    let y = DMatrix::from_fn(subjects, times, |i, t| {
        1.0 - 0.5 * x[(i, t)] + normal(&mut rng)
    });
    let col = CovariateColumn {
        name: "x".into(),
        values: x,
        time_independent: false,
    };
    PanelDataset::new(ResponseFamily::Continuous, y, vec![col]).unwrap()
}

#[test]
fn just_identified_identity_fit_is_least_squares() {
    let ds = continuous_panel(50, 1, 11);
    let model = ModelSpec::new(
        vec![CovariateSpec::new("x", TdcType::TypeI)],
        Link::Identity,
    );
    let sys = MomentSystem::new(model, 1).unwrap();
    let bound = sys.bind(&ds).unwrap();
    let fit = two_step_gmm(&bound, &DVector::zeros(2), &OptimizerSettings::default()).unwrap();

    let x = ds.covariates()[0].values.column(0).clone_owned();
    let y = ds.response().column(0).clone_owned();
    let design = DMatrix::from_fn(50, 2, |i, c| if c == 0 { 1.0 } else { x[i] });
    let ols = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * &y))
        .unwrap();
    assert!((&fit.beta - ols).amax() < 1e-8);
    assert!(fit.objective < 1e-12);
}

#[test]
fn intercept_only_single_time_is_the_mean() {
    let ds = continuous_panel(40, 1, 5);
    let sys = MomentSystem::new(ModelSpec::new(Vec::new(), Link::Identity), 1).unwrap();
    let bound = sys.bind(&ds).unwrap();
    let fit = two_step_gmm(&bound, &DVector::zeros(1), &OptimizerSettings::default()).unwrap();
    assert!((fit.beta[0] - ds.response().mean()).abs() < 1e-10);
}

#[test]
fn replayed_selection_picks_smallest_criterion() {
    let entries = vec![
        FitTermEntry {
            model_id: "a".into(),
            fit_term: -40.0,
            k: 2,
            j: 30,
        },
        FitTermEntry {
            model_id: "b".into(),
            fit_term: -52.0,
            k: 3,
            j: 45,
        },
        FitTermEntry {
            model_id: "c".into(),
            fit_term: -10.0,
            k: 1,
            j: 9,
        },
    ];
    let cfg = PenaltyConfig::default();
    let report = select_from_fit_terms(&entries, 1000, &cfg, 0).unwrap();
    let best = |f: &dyn Fn(&FitTermEntry) -> f64| {
        entries
            .iter()
            .min_by(|a, b| f(a).total_cmp(&f(b)))
            .unwrap()
            .model_id
            .clone()
    };
    let mppp = best(&|e| e.fit_term + mppp_penalty(e.k, e.j, cfg.c_mppp));
    let lp = best(&|e| e.fit_term + lp_penalty(e.k, e.j, 1000, cfg.c_lp));
    assert_eq!(report.ranking.winner(Criterion::Mppp), Some(mppp.as_str()));
    assert_eq!(report.ranking.winner(Criterion::Lp), Some(lp.as_str()));
}
