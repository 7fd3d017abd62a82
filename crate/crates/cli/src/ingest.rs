//! Long-format panel CSV plus JSON metadata sidecar.
//!
//! Data: `subject_id,time,y,<cov1>,...` with integer times `1..T`, rows in
//! any order. Metadata: response family, link and a type tag per covariate.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use pklic::{CovariateColumn, CovariateSpec, Error, Link, PanelDataset, ResponseFamily, TdcType};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub response_family: ResponseFamily,
    pub link: Link,
    /// Covariate name to type tag (`TypeI` .. `TypeIV`, `TimeIndependent`).
    pub covariates: BTreeMap<String, String>,
}

impl Metadata {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading metadata {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing metadata {}", path.display()))
    }

    fn tag(&self, name: &str) -> Result<TdcType> {
        let tag = self.covariates.get(name).ok_or_else(|| {
            anyhow::anyhow!("covariate `{name}` is in the data but not in the metadata")
        })?;
        Ok(tag.parse::<TdcType>()?)
    }
}

/// A parsed panel together with its covariate pool (in data-header order).
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: PanelDataset,
    pub pool: Vec<CovariateSpec>,
    pub link: Link,
}

const KEY_COLUMNS: [&str; 3] = ["subject_id", "time", "y"];

pub fn ingest_csv(data: &Path, metadata: &Path) -> Result<Ingested> {
    let meta = Metadata::load(metadata)?;
    let file = File::open(data).with_context(|| format!("opening data {}", data.display()))?;
    ingest_reader(file, &meta).with_context(|| format!("ingesting {}", data.display()))
}

pub fn ingest_reader<R: std::io::Read>(reader: R, meta: &Metadata) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[..3] != KEY_COLUMNS {
        bail!(
            "header must start with `subject_id,time,y`, found `{}`",
            header.join(",")
        );
    }
    let names = &header[3..];
    let mut pool = Vec::with_capacity(names.len());
    for (n, name) in names.iter().enumerate() {
        if names[..n].contains(name) {
            bail!("duplicate column `{name}`");
        }
        pool.push(CovariateSpec::new(name.clone(), meta.tag(name)?));
    }
    if let Some(extra) = meta.covariates.keys().find(|k| !names.contains(k)) {
        bail!("covariate `{extra}` is declared in the metadata but missing from the data");
    }

    // subject -> rows keyed by time, in order of first appearance
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<usize, Vec<f64>>> = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let at = line + 2;
        let subject = record[0].to_string();
        let time: usize = record[1].parse().ok().filter(|t| *t >= 1).ok_or_else(|| {
            anyhow::anyhow!("line {at}: time `{}` is not a positive integer", &record[1])
        })?;
        let mut values = Vec::with_capacity(record.len() - 2);
        for (field, col) in record.iter().skip(2).zip(&header[2..]) {
            let v: f64 = field.parse().map_err(|_| {
                anyhow::anyhow!("line {at}: `{col}` value `{field}` is not a number")
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("line {at}, column `{col}`")).into());
            }
            values.push(v);
        }
        let entry = rows.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            BTreeMap::new()
        });
        if entry.insert(time, values).is_some() {
            return Err(
                Error::Unbalanced(format!("subject `{subject}` has time {time} twice")).into(),
            );
        }
    }
    if order.is_empty() {
        return Err(Error::Empty("data file has no rows".into()).into());
    }

    let times = rows
        .values()
        .map(|r| r.keys().next_back().copied().unwrap_or(0))
        .max()
        .unwrap_or(0);
    for subject in &order {
        let r = &rows[subject];
        if r.len() != times || r.keys().copied().ne(1..=times) {
            return Err(Error::Unbalanced(format!(
                "subject `{subject}` has {} of {times} time points",
                r.len()
            ))
            .into());
        }
    }

    let subjects = order.len();
    let column = |c: usize| DMatrix::from_fn(subjects, times, |i, t| rows[&order[i]][&(t + 1)][c]);
    let y = column(0);
    let covariates = pool
        .iter()
        .enumerate()
        .map(|(n, spec)| CovariateColumn {
            name: spec.name.clone(),
            values: column(n + 1),
            time_independent: spec.tdc == TdcType::TimeIndependent,
        })
        .collect();
    let dataset = PanelDataset::new(meta.response_family, y, covariates)?;
    Ok(Ingested {
        dataset,
        pool,
        link: meta.link,
    })
}

/// Write `dataset` in the ingest format; subjects are numbered from 1.
pub fn write_panel(dataset: &PanelDataset, path: &Path) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write!(w, "subject_id,time,y")?;
    for c in dataset.covariates() {
        write!(w, ",{}", c.name)?;
    }
    writeln!(w)?;
    let y = dataset.response();
    for i in 0..dataset.subjects() {
        for t in 0..dataset.times() {
            write!(w, "{},{},{}", i + 1, t + 1, y[(i, t)])?;
            for c in dataset.covariates() {
                write!(w, ",{}", c.values[(i, t)])?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn metadata_for(pool: &[CovariateSpec], family: ResponseFamily, link: Link) -> Metadata {
    Metadata {
        response_family: family,
        link,
        covariates: pool
            .iter()
            .map(|c| (c.name.clone(), c.tdc.tag().to_string()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(pairs: &[(&str, &str)], family: ResponseFamily) -> Metadata {
        Metadata {
            response_family: family,
            link: match family {
                ResponseFamily::Binary => Link::Logit,
                ResponseFamily::Continuous => Link::Identity,
            },
            covariates: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    #[test]
    fn rows_may_come_in_any_order() {
        let csv = "subject_id,time,y,x\nb,2,0.5,4\na,1,1.5,1\nb,1,2.5,3\na,2,3.5,2\n";
        let got = ingest_reader(
            csv.as_bytes(),
            &meta(&[("x", "TypeI")], ResponseFamily::Continuous),
        )
        .unwrap();
        let ds = &got.dataset;
        assert_eq!((ds.subjects(), ds.times()), (2, 2));
        // first-appearance order: b, then a
        assert_eq!(ds.response()[(0, 0)], 2.5);
        assert_eq!(ds.response()[(1, 1)], 3.5);
        assert_eq!(ds.covariate("x").unwrap().values[(0, 1)], 4.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = meta(&[("x", "TypeI")], ResponseFamily::Continuous);
        let cases = [
            "subject,time,y,x\n1,1,0,0\n",
            "subject_id,time,y,x\n1,0,0,0\n",
            "subject_id,time,y,x\n1,1,NaN,0\n",
            "subject_id,time,y,x\n1,1,abc,0\n",
            "subject_id,time,y,x\n1,1,0,0\n1,1,0,0\n",
            "subject_id,time,y,x\n1,1,0,0\n1,3,0,0\n",
            "subject_id,time,y\n1,1,0\n",
            "subject_id,time,y,x,z\n1,1,0,0,0\n",
        ];
        for c in cases {
            assert!(ingest_reader(c.as_bytes(), &m).is_err(), "{c}");
        }
        let bad_tag = meta(&[("x", "TypeV")], ResponseFamily::Continuous);
        assert!(ingest_reader("subject_id,time,y,x\n1,1,0,0\n".as_bytes(), &bad_tag).is_err());
        let binary = meta(&[("x", "TypeI")], ResponseFamily::Binary);
        let err = ingest_reader("subject_id,time,y,x\n1,1,2,0\n".as_bytes(), &binary).unwrap_err();
        assert!(matches!(
            err.downcast_ref::<Error>(),
            Some(Error::NonBinaryResponse(_))
        ));
    }

    #[test]
    fn time_independent_must_be_constant() {
        let m = meta(&[("g", "TimeIndependent")], ResponseFamily::Continuous);
        let csv = "subject_id,time,y,g\n1,1,0,1\n1,2,0,0\n";
        assert!(ingest_reader(csv.as_bytes(), &m).is_err());
    }
}
