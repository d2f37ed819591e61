use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::metrics::MetricsRow;
use crate::error::{Result, SqnError};

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(SqnError::from)).collect()
}

/// Last-row figures of one metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub final_time_avg: f64,
    pub final_moving_avg: Option<f64>,
    /// `(t, moving_avg)` pairs, kept for crossing times.
    #[serde(skip)]
    pub moving: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub seeds: usize,
    pub time_avg_mean: f64,
    /// Half-width of the 95% interval; `None` for a single seed.
    pub time_avg_ci: Option<f64>,
    pub moving_avg_mean: Option<f64>,
    pub moving_avg_ci: Option<f64>,
    /// Mean first step at which the moving average drops below the
    /// baseline's final time average. Infinite if some seed never does.
    pub crossing_time: Option<f64>,
}

/// Mean and 95% t-interval half-width.
pub fn mean_ci(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").inverse_cdf(0.975);
    (mean, Some(t * (var / n as f64).sqrt()))
}

fn seed_of(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("seed_")?.strip_suffix(".csv")?.parse().ok()
}

fn load_controller(dir: &Path) -> Result<Vec<SeedFinal>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| seed_of(&p).map(|s| (s, p)))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for (seed, path) in files {
        let rows = read_metrics(&path)?;
        let Some(last) = rows.last() else { continue };
        out.push(SeedFinal {
            seed,
            final_time_avg: last.time_avg,
            final_moving_avg: last.moving_avg,
            moving: rows.iter().filter_map(|r| r.moving_avg.map(|m| (r.t, m))).collect(),
        });
    }
    Ok(out)
}

/// Summarize every controller directory under `run_dir`. Crossing times are
/// measured against `baseline` (matching seeds when present).
pub fn summarize(run_dir: &Path, baseline: Option<&str>) -> Result<Vec<ControllerSummary>> {
    if !run_dir.is_dir() {
        return Err(SqnError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", run_dir.display()))));
    }
    let mut all: BTreeMap<String, Vec<SeedFinal>> = BTreeMap::new();
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        if path.is_dir() {
            let seeds = load_controller(&path)?;
            if !seeds.is_empty() {
                all.insert(path.file_name().unwrap().to_string_lossy().into_owned(), seeds);
            }
        }
    }
    if all.is_empty() {
        return Err(SqnError::InvalidParameter(format!("no metrics files under {}", run_dir.display())));
    }
    let base_name = baseline
        .map(str::to_owned)
        .or_else(|| ["maxweight", "backpressure"].iter().find(|b| all.contains_key(**b)).map(|b| b.to_string()));
    let base: Option<BTreeMap<u64, f64>> =
        base_name.as_ref().and_then(|b| all.get(b)).map(|v| v.iter().map(|s| (s.seed, s.final_time_avg)).collect());
    let base_mean = base.as_ref().map(|b| b.values().sum::<f64>() / b.len() as f64);

    let mut out = Vec::new();
    for (name, seeds) in &all {
        let (time_avg_mean, time_avg_ci) = mean_ci(&seeds.iter().map(|s| s.final_time_avg).collect::<Vec<_>>());
        let ma: Vec<f64> = seeds.iter().filter_map(|s| s.final_moving_avg).collect();
        let (moving_avg_mean, moving_avg_ci) = if ma.len() == seeds.len() {
            let (m, c) = mean_ci(&ma);
            (Some(m), c)
        } else {
            (None, None)
        };
        let crossing_time = base.as_ref().map(|b| {
            let times: Vec<f64> = seeds
                .iter()
                .map(|s| {
                    let level = b.get(&s.seed).copied().or(base_mean).unwrap();
                    s.moving.iter().find(|(_, m)| *m < level).map_or(f64::INFINITY, |(t, _)| *t as f64)
                })
                .collect();
            times.iter().sum::<f64>() / times.len() as f64
        });
        out.push(ControllerSummary {
            controller: name.clone(),
            seeds: seeds.len(),
            time_avg_mean,
            time_avg_ci,
            moving_avg_mean,
            moving_avg_ci,
            crossing_time,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.4}"),
    }
}

/// Write the summary table as CSV.
pub fn write_summary<W: Write>(rows: &[ControllerSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["controller", "seeds", "time_avg_mean", "time_avg_ci95", "moving_avg_mean", "moving_avg_ci95", "crossing_time"])?;
    for r in rows {
        w.write_record([
            r.controller.clone(),
            r.seeds.to_string(),
            format!("{:.4}", r.time_avg_mean),
            fmt_opt(r.time_avg_ci),
            fmt_opt(r.moving_avg_mean),
            fmt_opt(r.moving_avg_ci),
            fmt_opt(r.crossing_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}
