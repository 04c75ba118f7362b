//! `compare`: a metric between the density series of two run directories.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use clap::ValueEnum;
use ddsde_core::fpe::{self, TestFunctionSet};
use ddsde_core::grid as grid_io;
use ddsde_core::GridDensity;

use crate::config::ExperimentConfig;
use crate::manifest::{RunManifest, CONFIG_FILE};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    L1,
    Sup,
    WeakResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    /// `(time, value)` rows; for the weak residual, one row per run and test
    /// function at the final time.
    pub rows: Vec<(f64, f64)>,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn load_series(dir: &Path) -> Result<(ExperimentConfig, Vec<(f64, GridDensity)>), CliError> {
    let manifest = RunManifest::load_verified(dir)?;
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let mut series = Vec::with_capacity(manifest.series.len());
    for (t, rel) in &manifest.series {
        let path = dir.join(rel);
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        series.push((*t, grid_io::read_binary(BufReader::new(file))?));
    }
    if series.is_empty() {
        return Err(CliError::Corrupt(format!("{}: manifest lists no density series", dir.display())));
    }
    Ok((config, series))
}

fn weak_residuals(config: &ExperimentConfig, series: &[(f64, GridDensity)]) -> Result<Vec<f64>, CliError> {
    let resolved = config.validate()?;
    let tests = TestFunctionSet::catalog(series[0].1.spec())?;
    let t = series.last().expect("non-empty").0;
    Ok(fpe::weak_residual(series, Some(&resolved.initial), &resolved.drift, &tests, t)?)
}

pub fn compare(run_a: &Path, run_b: &Path, metric: Metric, tolerance: Option<f64>) -> Result<Comparison, CliError> {
    let (config_a, a) = load_series(run_a)?;
    let (config_b, b) = load_series(run_b)?;
    // Every metric needs grids that can be brought onto one another.
    let shape = fpe::uniqueness_separation(&a[a.len() - 1..], &b[b.len() - 1..]);
    if let Err(e) = shape {
        return Err(CliError::Engine(format!("incompatible runs: {e}")));
    }
    let thresholds = &config_a.compare;
    let (rows, tol) = match metric {
        Metric::L1 => (fpe::uniqueness_separation(&a, &b)?, thresholds.l1),
        Metric::Sup => {
            let mut rows = vec![];
            for (t, ra) in &a {
                if let Some((_, rb)) = b.iter().find(|(s, _)| (s - t).abs() <= 1e-9 * t.max(1.0)) {
                    rows.push((*t, ra.sup_distance(rb)?));
                }
            }
            if rows.is_empty() {
                return Err(CliError::Engine("the two runs share no snapshot time".into()));
            }
            (rows, thresholds.sup)
        }
        Metric::WeakResidual => {
            let t = a.last().expect("non-empty").0;
            let mut rows: Vec<(f64, f64)> = weak_residuals(&config_a, &a)?.into_iter().map(|r| (t, r)).collect();
            let t = b.last().expect("non-empty").0;
            rows.extend(weak_residuals(&config_b, &b)?.into_iter().map(|r| (t, r)));
            (rows, thresholds.weak_residual)
        }
    };
    let tolerance = tolerance.unwrap_or(tol);
    let value = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(Comparison {
        metric,
        rows,
        value,
        tolerance,
        pass: value <= tolerance,
    })
}
