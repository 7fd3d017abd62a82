use std::path::Path;

use anyhow::{bail, Context, Result};
use pklic::selection::{validate_candidates, ModelEvaluation, SensitivityRow};
use pklic::simgen::{generate_panel, run_scenario, ScenarioReport};
use pklic::tilt::{lp_penalty, mppp_penalty};
use pklic::{
    enumerate_candidates, evaluate_model, run_selection, select_from_fit_terms, sensitivity_sweep,
    Candidate, CovariateSpec, Criterion, FitTermEntry, ModelSpec, SelectionReport,
};
use serde::{Deserialize, Serialize};

use crate::config::{CandidateSource, RunConfig};
use crate::ingest::{ingest_csv, metadata_for, write_panel, Ingested};
use crate::report::{write_outputs, Table, Written};

/// Result of one command: the files written and the warnings embedded in
/// the report.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub written: Written,
    pub warnings: Vec<String>,
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(f)),
        None => Ok(f()),
    }
}

fn load_data(cfg: &RunConfig) -> Result<Ingested> {
    let (Some(data), Some(meta)) = (&cfg.data, &cfg.metadata) else {
        bail!("this command needs both --data and --metadata (or `data` and `metadata` in the config)");
    };
    ingest_csv(data, meta)
}

fn lookup(pool: &[CovariateSpec], name: &str) -> Result<CovariateSpec> {
    pool.iter()
        .find(|c| c.name == name)
        .cloned()
        .with_context(|| format!("covariate `{name}` is not in the data"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateEntry {
    id: String,
    covariates: Vec<String>,
}

fn load_candidates(cfg: &RunConfig, ing: &Ingested) -> Result<Vec<Candidate>> {
    match &cfg.candidates {
        CandidateSource::PowerSet => Ok(enumerate_candidates(&ing.pool, ing.link)?),
        CandidateSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading candidates {}", path.display()))?;
            let entries: Vec<CandidateEntry> = serde_json::from_str(&text)
                .with_context(|| format!("parsing candidates {}", path.display()))?;
            let list = entries
                .into_iter()
                .map(|e| {
                    let covs = e
                        .covariates
                        .iter()
                        .map(|n| lookup(&ing.pool, n))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Candidate {
                        id: e.id,
                        model: ModelSpec::new(covs, ing.link),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(validate_candidates(list)?)
        }
    }
}

fn join(names: &[String]) -> String {
    names.join("+")
}

fn criterion_tag(c: Criterion) -> &'static str {
    match c {
        Criterion::Mppp => "mppp",
        Criterion::Lp => "lp",
    }
}

fn row_warnings(report: &SelectionReport) -> Vec<String> {
    let mut out = Vec::new();
    for r in &report.rows {
        if let Some(f) = &r.failure {
            out.push(format!("{} excluded from the rankings: {f}", r.id));
        } else if !r.gmm_converged {
            out.push(format!(
                "{}: GMM stopped without meeting the gradient tolerance",
                r.id
            ));
        }
    }
    out
}

pub fn selection_table(report: &SelectionReport) -> Table {
    let mut t = Table::new(&[
        "model_id",
        "covariates",
        "k",
        "j",
        "fit_term",
        "mppp_penalty",
        "lp_penalty",
        "mppp_klic",
        "lp_klic",
        "mppp_rank",
        "lp_rank",
        "gmm_converged",
        "failure",
    ]);
    let rank = |list: &[String], id: &str| {
        list.iter()
            .position(|x| x == id)
            .map(|p| (p + 1).to_string())
            .unwrap_or_default()
    };
    for r in &report.rows {
        t.push(vec![
            r.id.as_str().into(),
            join(&r.covariates).into(),
            r.k.into(),
            r.j.into(),
            r.fit_term.into(),
            r.mppp_penalty.into(),
            r.lp_penalty.into(),
            r.mppp_klic.into(),
            r.lp_klic.into(),
            rank(&report.ranking.mppp, &r.id).into(),
            rank(&report.ranking.lp, &r.id).into(),
            r.gmm_converged.into(),
            r.failure.clone().unwrap_or_default().into(),
        ]);
    }
    t
}

pub fn select(cfg: &RunConfig) -> Result<Outcome> {
    let ing = load_data(cfg)?;
    let candidates = load_candidates(cfg, &ing)?;
    let report = in_pool(cfg.workers, || {
        run_selection(
            &ing.dataset,
            &candidates,
            &cfg.penalty,
            &cfg.optimizer,
            cfg.seed,
        )
    })??;
    let warnings = row_warnings(&report);
    let written = write_outputs(
        &cfg.out,
        "select",
        cfg,
        warnings.clone(),
        &report,
        &selection_table(&report),
    )?;
    Ok(Outcome { written, warnings })
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub covariates: Vec<String>,
    pub parameters: Vec<String>,
    pub n_obs: usize,
    pub evaluation: ModelEvaluation,
    pub mppp_penalty: f64,
    pub lp_penalty: f64,
    pub mppp_klic: Option<f64>,
    pub lp_klic: Option<f64>,
}

pub fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let ing = load_data(cfg)?;
    let covs = if cfg.covariates.is_empty() {
        ing.pool.clone()
    } else {
        cfg.covariates
            .iter()
            .map(|n| lookup(&ing.pool, n))
            .collect::<Result<Vec<_>>>()?
    };
    let model = ModelSpec::new(covs, ing.link);
    let eval = evaluate_model(&ing.dataset, &model, &cfg.optimizer)?;
    let n_obs = ing.dataset.n_obs();
    let mppp = mppp_penalty(eval.k, eval.j, cfg.penalty.c_mppp);
    let lp = lp_penalty(eval.k, eval.j, n_obs, cfg.penalty.c_lp);
    let mut warnings = Vec::new();
    if let Some(f) = &eval.failure {
        warnings.push(format!("no fit term: {f}"));
    } else if !eval.gmm_converged() {
        warnings.push("GMM stopped without meeting the gradient tolerance".into());
    }
    let report = FitReport {
        covariates: model
            .covariate_names()
            .into_iter()
            .map(String::from)
            .collect(),
        parameters: model.parameter_names(),
        n_obs,
        mppp_penalty: mppp,
        lp_penalty: lp,
        mppp_klic: eval.fit_term.map(|f| f + mppp),
        lp_klic: eval.fit_term.map(|f| f + lp),
        evaluation: eval,
    };
    let mut t = Table::new(&["quantity", "value"]);
    if let Some(beta) = &report.evaluation.beta {
        for (name, b) in report.parameters.iter().zip(beta) {
            t.push(vec![format!("beta[{name}]").into(), (*b).into()]);
        }
    }
    t.push(vec!["k".into(), report.evaluation.k.into()]);
    t.push(vec!["j".into(), report.evaluation.j.into()]);
    t.push(vec![
        "gmm_objective".into(),
        report.evaluation.gmm_objective.into(),
    ]);
    t.push(vec![
        "klic_objective".into(),
        report.evaluation.klic_objective.into(),
    ]);
    t.push(vec!["fit_term".into(), report.evaluation.fit_term.into()]);
    t.push(vec!["mppp_klic".into(), report.mppp_klic.into()]);
    t.push(vec!["lp_klic".into(), report.lp_klic.into()]);
    let written = write_outputs(&cfg.out, "fit", cfg, warnings.clone(), &report, &t)?;
    Ok(Outcome { written, warnings })
}

pub fn read_fit_terms(path: &Path) -> Result<Vec<FitTermEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening fit terms {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["model_id", "fit_term", "k", "j"] {
        bail!(
            "fit-term file header must be `model_id,fit_term,k,j`, found `{}`",
            header.join(",")
        );
    }
    rdr.deserialize()
        .collect::<std::result::Result<Vec<FitTermEntry>, _>>()
        .with_context(|| format!("parsing fit terms {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct SensitivityReport {
    pub n_obs: usize,
    pub fit_terms: Vec<FitTermEntry>,
    /// Candidates without a fit term (only when fitting from data).
    pub excluded: Vec<String>,
    /// Full ranking at the configured penalty multipliers.
    pub selection: SelectionReport,
    pub rows: Vec<SensitivityRow>,
}

pub fn sensitivity(cfg: &RunConfig) -> Result<Outcome> {
    let mut warnings = Vec::new();
    let (selection, n_obs, excluded) = match &cfg.fit_terms {
        Some(path) => {
            let entries = read_fit_terms(path)?;
            let n_obs = cfg
                .n_obs
                .context("replaying fit terms needs the observation count (--n-obs or `n_obs` in the config)")?;
            (
                select_from_fit_terms(&entries, n_obs, &cfg.penalty, cfg.seed)?,
                n_obs,
                Vec::new(),
            )
        }
        None => {
            let ing = load_data(cfg)?;
            let candidates = load_candidates(cfg, &ing)?;
            let report = in_pool(cfg.workers, || {
                run_selection(
                    &ing.dataset,
                    &candidates,
                    &cfg.penalty,
                    &cfg.optimizer,
                    cfg.seed,
                )
            })??;
            warnings.extend(row_warnings(&report));
            let excluded = report
                .rows
                .iter()
                .filter(|r| r.fit_term.is_none())
                .map(|r| r.id.clone())
                .collect();
            (report, ing.dataset.n_obs(), excluded)
        }
    };
    let fit_terms = selection.fit_terms();
    let rows = sensitivity_sweep(&fit_terms, n_obs, &cfg.c_mppp_grid, &cfg.c_lp_grid)?;
    let mut t = Table::new(&[
        "criterion",
        "c",
        "selected",
        "covariates",
        "k",
        "j",
        "value",
    ]);
    for r in &rows {
        let covs = selection
            .row(&r.selected)
            .map(|x| join(&x.covariates))
            .unwrap_or_default();
        t.push(vec![
            criterion_tag(r.criterion).into(),
            r.c.into(),
            r.selected.as_str().into(),
            covs.into(),
            r.k.into(),
            r.j.into(),
            r.value.into(),
        ]);
    }
    let report = SensitivityReport {
        n_obs,
        fit_terms,
        excluded,
        selection,
        rows,
    };
    let written = write_outputs(&cfg.out, "sensitivity", cfg, warnings.clone(), &report, &t)?;
    Ok(Outcome { written, warnings })
}

pub fn scenario_table(report: &ScenarioReport) -> Table {
    let mut t = Table::new(&[
        "model_id",
        "covariates",
        "k",
        "j",
        "successes",
        "hull_failures",
        "tilt_nonconverged",
        "saturated_fits",
        "other_failures",
        "gmm_nonconverged",
        "mean_fit_term",
        "mppp_penalty",
        "lp_penalty",
        "mean_mppp_klic",
        "mean_lp_klic",
        "mppp_frequency",
        "lp_frequency",
    ]);
    for m in &report.models {
        t.push(vec![
            m.id.as_str().into(),
            join(&m.covariates).into(),
            m.k.into(),
            m.j.into(),
            m.successes.into(),
            m.hull_failures.into(),
            m.tilt_nonconverged.into(),
            m.saturated_fits.into(),
            m.other_failures.into(),
            m.gmm_nonconverged.into(),
            m.mean_fit_term.into(),
            m.mppp_penalty.into(),
            m.lp_penalty.into(),
            m.mean_mppp_klic.into(),
            m.mean_lp_klic.into(),
            m.mppp_selection_frequency.into(),
            m.lp_selection_frequency.into(),
        ]);
    }
    t
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let sim = cfg.simulation_config()?;
    let candidates = sim.scenario_models()?;
    let report = run_scenario(&sim, &candidates, &cfg.penalty, &cfg.optimizer, cfg.workers)?;
    let mut warnings = Vec::new();
    for m in &report.models {
        let failed = m.failures();
        if failed > 0 {
            warnings.push(format!(
                "{}: {failed} of {} replicates without a fit term (hull {}, tilting {}, saturated {}, other {})",
                m.id, sim.replicates, m.hull_failures, m.tilt_nonconverged, m.saturated_fits, m.other_failures
            ));
        }
    }
    if report.complete_replicates < sim.replicates {
        warnings.push(format!(
            "means and frequencies use the {} of {} replicates where every model has a fit term",
            report.complete_replicates, sim.replicates
        ));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let n_export = cfg.simulation.export_panels.min(sim.replicates);
    if n_export > 0 {
        let pool: Vec<CovariateSpec> = sim
            .covariates
            .iter()
            .map(|c| CovariateSpec::new(c.name.clone(), c.tdc))
            .collect();
        let meta = metadata_for(&pool, sim.family, sim.link);
        std::fs::write(
            cfg.out.join("panel_metadata.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        for r in 0..n_export {
            let panel = generate_panel(&sim, r as u64)?;
            write_panel(&panel, &cfg.out.join(format!("panel_r{r:04}.csv")))?;
        }
    }
    let written = write_outputs(
        &cfg.out,
        "simulate",
        cfg,
        warnings.clone(),
        &report,
        &scenario_table(&report),
    )?;
    Ok(Outcome { written, warnings })
}
