//! Report emission. Every command writes `<name>.json` (full precision,
//! with the resolved configuration), `<name>.csv` (4 decimals, for reading)
//! and `<name>_full.csv` (same table, shortest round-trip reals).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Numerical constants applied by the pipeline, recorded so a report says
/// how its numbers were produced.
#[derive(Clone, Debug, Serialize)]
pub struct AppliedConstants {
    pub ridge_start: f64,
    pub ridge_max: f64,
    pub gmm_max_step: f64,
    pub saturation_floor: f64,
    pub normal_score_clamp: f64,
    pub moment_divisor: &'static str,
    pub fit_term: &'static str,
}

impl AppliedConstants {
    pub fn current() -> Self {
        Self {
            ridge_start: pklic::numerics::linalg::RIDGE_START,
            ridge_max: pklic::numerics::linalg::RIDGE_MAX,
            gmm_max_step: pklic::gmm::DEFAULT_GMM_MAX_STEP,
            saturation_floor: pklic::gmm::SATURATION_FLOOR,
            normal_score_clamp: pklic::simgen::NORMAL_SCORE_CLAMP,
            moment_divisor: "subjects",
            fit_term: "-2 * N * ln(1 / klic_objective), N = subjects * times",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub constants: AppliedConstants,
    pub warnings: Vec<String>,
    pub result: &'a T,
}

/// A table with a 4-decimal rendering and a full-precision rendering.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(usize),
    Real(Option<f64>),
    Flag(bool),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(Some(v))
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        Cell::Real(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
    }
}

impl Cell {
    fn render(&self, full: bool) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Real(None) => String::new(),
            Cell::Real(Some(v)) if full => v.to_string(),
            Cell::Real(Some(v)) => format!("{v:.4}"),
            Cell::Flag(b) => b.to_string(),
        }
    }
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self, full: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.render(full)))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct Written {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub full_csv: PathBuf,
}

pub fn write_outputs<T: Serialize>(
    dir: &Path,
    name: &str,
    config: &RunConfig,
    warnings: Vec<String>,
    result: &T,
    table: &Table,
) -> Result<Written> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let envelope = Envelope {
        tool: "pklic",
        version: env!("CARGO_PKG_VERSION"),
        core_version: pklic::VERSION,
        command: name,
        config,
        constants: AppliedConstants::current(),
        warnings,
        result,
    };
    let out = Written {
        json: dir.join(format!("{name}.json")),
        csv: dir.join(format!("{name}.csv")),
        full_csv: dir.join(format!("{name}_full.csv")),
    };
    let mut json = serde_json::to_string_pretty(&envelope)?;
    json.push('\n');
    fs::write(&out.json, json).with_context(|| format!("writing {}", out.json.display()))?;
    fs::write(&out.csv, table.to_csv(false)?)?;
    fs::write(&out.full_csv, table.to_csv(true)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_both_precisions() {
        let mut t = Table::new(&["id", "k", "value", "missing", "ok"]);
        t.push(vec![
            "M1".into(),
            6.into(),
            (1.0 / 3.0).into(),
            None.into(),
            true.into(),
        ]);
        assert_eq!(
            t.to_csv(false).unwrap(),
            "id,k,value,missing,ok\nM1,6,0.3333,,true\n"
        );
        let full = t.to_csv(true).unwrap();
        let v: f64 = full
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }
}
