#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// A panel shaped like the child-health application: three survey rounds,
/// age (Type I), BMI (Type II, fed by the previous response), gender (time
/// independent) and two round indicators.
pub fn application_panel(subjects: usize, binary: bool, seed: u64) -> (String, String) {
    let mut rng = pklic::numerics::rng_stream(seed, 0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut csv = String::from("subject_id,time,y,age,bmi,gender,round2,round3\n");
    for i in 0..subjects {
        let gender = f64::from(u8::from(rng.random_bool(0.5)));
        let age0: f64 = rng.random_range(0.5..5.0);
        let mut prev = 0.0;
        for t in 1..=3 {
            let age = age0 + 0.5 * (t - 1) as f64;
            let bmi = 16.0 + 0.8 * noise.sample(&mut rng) + 0.3 * prev;
            let (r2, r3) = (f64::from(u8::from(t == 2)), f64::from(u8::from(t == 3)));
            let eta = 0.4 - 0.3 * age + 0.05 * (bmi - 16.0) + 0.4 * gender + 0.2 * r2 - 0.1 * r3;
            let y = if binary {
                let p = 1.0 / (1.0 + (-eta).exp());
                f64::from(u8::from(rng.random_bool(p)))
            } else {
                eta + noise.sample(&mut rng)
            };
            prev = y - eta;
            writeln!(csv, "{},{t},{y},{age},{bmi},{gender},{r2},{r3}", i + 1).unwrap();
        }
    }
    let family = if binary { "binary" } else { "continuous" };
    let link = if binary { "logit" } else { "identity" };
    let meta = format!(
        r#"{{"response_family": "{family}", "link": "{link}", "covariates": {{"age": "TypeI", "bmi": "TypeII", "gender": "TimeIndependent", "round2": "TypeI", "round3": "TypeI"}}}}"#
    );
    (csv, meta)
}

pub fn write_application_panel(
    dir: &Path,
    subjects: usize,
    binary: bool,
    seed: u64,
) -> (PathBuf, PathBuf) {
    let (csv, meta) = application_panel(subjects, binary, seed);
    let data = dir.join("panel.csv");
    let metadata = dir.join("panel.json");
    std::fs::write(&data, csv).unwrap();
    std::fs::write(&metadata, meta).unwrap();
    (data, metadata)
}
