//! Run configuration: a JSON file with defaults for every field, then
//! command-line overrides on top. The resolved value is embedded in every
//! report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pklic::simgen::SimulationConfig;
use pklic::{OptimizerSettings, PenaltyConfig, ResponseFamily};
use serde::{Deserialize, Serialize};

/// Where candidate models come from for `select` and `sensitivity`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum CandidateSource {
    PowerSet,
    /// JSON list of `{"id": ..., "covariates": [...]}`.
    File(PathBuf),
}

impl From<String> for CandidateSource {
    fn from(s: String) -> Self {
        if s == "power-set" {
            Self::PowerSet
        } else {
            Self::File(PathBuf::from(s))
        }
    }
}

impl From<CandidateSource> for String {
    fn from(c: CandidateSource) -> Self {
        match c {
            CandidateSource::PowerSet => "power-set".into(),
            CandidateSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub family: ResponseFamily,
    pub subjects: usize,
    pub times: usize,
    pub replicates: usize,
    /// Write the first this-many replicate panels next to the report.
    pub export_panels: usize,
    /// Full generator settings; replaces the published design when present.
    /// `seed` and `replicates` are still taken from the run.
    pub design: Option<SimulationConfig>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            family: ResponseFamily::Continuous,
            subjects: 100,
            times: 5,
            replicates: 200,
            export_panels: 0,
            design: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub penalty: PenaltyConfig,
    pub optimizer: OptimizerSettings,
    pub data: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub candidates: CandidateSource,
    /// Covariates of the single model fitted by `fit`; empty means the
    /// whole pool.
    pub covariates: Vec<String>,
    /// Precomputed `model_id,fit_term,k,j` table for `sensitivity`.
    pub fit_terms: Option<PathBuf>,
    /// Observation count `N` used with `fit_terms`.
    pub n_obs: Option<usize>,
    pub c_mppp_grid: Vec<f64>,
    pub c_lp_grid: Vec<f64>,
    pub simulation: SimulationSection,
    // run-environment settings, kept out of the report snapshot
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            penalty: PenaltyConfig::default(),
            optimizer: OptimizerSettings::default(),
            data: None,
            metadata: None,
            candidates: CandidateSource::PowerSet,
            covariates: Vec::new(),
            fit_terms: None,
            n_obs: None,
            c_mppp_grid: vec![0.05, 0.10, 0.15, 0.20],
            c_lp_grid: vec![0.005, 0.010, 0.020, 0.030],
            simulation: SimulationSection::default(),
            out: PathBuf::from("."),
            workers: None,
        }
    }
}

/// Flag values that override the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub c_mppp: Option<f64>,
    pub c_lp: Option<f64>,
    pub out: Option<PathBuf>,
    pub replicates: Option<usize>,
    pub candidates: Option<String>,
    pub fit_terms: Option<PathBuf>,
    pub n_obs: Option<usize>,
    pub workers: Option<usize>,
    pub data: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub covariates: Option<Vec<String>>,
    pub c_mppp_grid: Option<Vec<f64>>,
    pub c_lp_grid: Option<Vec<f64>>,
    pub family: Option<ResponseFamily>,
    pub subjects: Option<usize>,
    pub times: Option<usize>,
    pub export_panels: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(file: Option<&Path>, o: Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = o.$src { $dst = v; })*
            };
        }
        set! {
            seed => c.seed,
            c_mppp => c.penalty.c_mppp,
            c_lp => c.penalty.c_lp,
            out => c.out,
            replicates => c.simulation.replicates,
            covariates => c.covariates,
            c_mppp_grid => c.c_mppp_grid,
            c_lp_grid => c.c_lp_grid,
            family => c.simulation.family,
            subjects => c.simulation.subjects,
            times => c.simulation.times,
            export_panels => c.simulation.export_panels,
        }
        if let Some(v) = o.candidates {
            c.candidates = v.into();
        }
        if o.fit_terms.is_some() {
            c.fit_terms = o.fit_terms;
        }
        if o.n_obs.is_some() {
            c.n_obs = o.n_obs;
        }
        if o.data.is_some() {
            c.data = o.data;
        }
        if o.metadata.is_some() {
            c.metadata = o.metadata;
        }
        if o.workers.is_some() {
            c.workers = o.workers;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        self.optimizer.validate()?;
        if self.workers == Some(0) {
            bail!("--workers must be at least 1");
        }
        Ok(())
    }

    /// Generator settings for `simulate`.
    pub fn simulation_config(&self) -> Result<SimulationConfig> {
        let s = &self.simulation;
        let mut cfg = match &s.design {
            Some(d) => d.clone(),
            None => SimulationConfig::paper_default(
                s.family,
                s.subjects,
                s.times,
                s.replicates,
                self.seed,
            ),
        };
        cfg.seed = self.seed;
        cfg.replicates = s.replicates;
        cfg.validate()?;
        Ok(cfg)
    }
}
