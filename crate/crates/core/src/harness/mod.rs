//! Online experiment driver: pilot under the stabilizing policy, threshold
//! estimation, then continuous training with no resets. One metrics CSV per
//! seed under `<out>/<controller>/`.

mod metrics;
mod runner;
mod summary;

pub use metrics::{moving_average, time_average, MetricsAccumulator, MetricsRow, METRICS_HEADER};
pub use runner::{PilotSummary, Runner, SeedReport};
pub use summary::{read_metrics, summarize, write_summary, ControllerSummary, SeedFinal};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use crate::baselines::BaselinePolicy;
use crate::drift::{estimate_threshold, run_pilot, PilotOptions, PilotRun, ThresholdEstimate, ThresholdRule};
use crate::env::{Environment, NetworkConfig};
use crate::error::{Result, SqnError};
use crate::rng::{stream_rng, Stream};
use crate::train::{Algorithm, TrainConfig};

/// What drives the network: a learner or a fixed classical policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Controller {
    Learn(Algorithm),
    Fixed(BaselinePolicy),
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Self::Learn(a) => a.name(),
            Self::Fixed(BaselinePolicy::MaxWeight) => "maxweight",
            Self::Fixed(BaselinePolicy::Backpressure) => "backpressure",
            Self::Fixed(BaselinePolicy::Randomized) => "random",
        }
    }

    pub fn is_learner(self) -> bool {
        matches!(self, Self::Learn(_))
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Controller {
    type Err = SqnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxweight" => Ok(Self::Fixed(BaselinePolicy::MaxWeight)),
            "backpressure" => Ok(Self::Fixed(BaselinePolicy::Backpressure)),
            "random" => Ok(Self::Fixed(BaselinePolicy::Randomized)),
            other => other.parse().map(Self::Learn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    /// Cap on pilot episodes.
    pub max_episodes: usize,
    pub window: usize,
    pub tol: f64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self { max_episodes: 50, window: 10_000, tol: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub controller: Controller,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub train: TrainConfig,
    pub pilot: PilotConfig,
    pub omega: f64,
    pub gamma: f64,
    pub r_min: f64,
    pub threshold_rule: ThresholdRule,
    pub ma_window: usize,
    pub out_dir: PathBuf,
    /// Episodes between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub write_drift_tables: bool,
}

impl ExperimentConfig {
    pub fn new(network: NetworkConfig, controller: Controller, out_dir: impl Into<PathBuf>) -> Self {
        let algorithm = match controller {
            Controller::Learn(a) => a,
            Controller::Fixed(_) => Algorithm::IaPpo,
        };
        let train = TrainConfig::for_kind(network.kind, algorithm);
        Self {
            network,
            controller,
            seeds: (0..5).collect(),
            total_steps: 200_000,
            train,
            pilot: PilotConfig::default(),
            omega: -0.1,
            gamma: 0.1,
            r_min: 0.05,
            threshold_rule: ThresholdRule::LastCrossing,
            ma_window: 10_000,
            out_dir: out_dir.into(),
            checkpoint_every: 10,
            write_drift_tables: true,
        }
    }

    /// Directory holding this controller's per-seed files.
    pub fn seed_dir(&self) -> PathBuf {
        self.out_dir.join(self.controller.name())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SqnError::InvalidParameter(m));
        if let Controller::Learn(a) = self.controller {
            if a != self.train.algorithm {
                return bad(format!("controller {a} does not match training algorithm {}", self.train.algorithm));
            }
            self.train.validate()?;
            if a.uses_gate() {
                let pilot = (self.pilot.max_episodes * self.train.episode_len) as u64;
                if self.total_steps < pilot {
                    return bad(format!("total steps {} below the pilot budget {pilot}", self.total_steps));
                }
            }
        }
        if self.train.episode_len == 0 {
            return bad("episode length must be positive".into());
        }
        if self.ma_window == 0 {
            return bad("moving-average window must be positive".into());
        }
        if self.omega >= 0.0 {
            return bad(format!("omega must be negative, got {}", self.omega));
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        Ok(())
    }
}

/// Run every seed in parallel to completion.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedReport>> {
    config.validate()?;
    fs::create_dir_all(config.seed_dir())?;
    fs::write(config.seed_dir().join("config.json"), serde_json::to_string_pretty(config)?)?;
    config.seeds.par_iter().map(|seed| Runner::new(config.clone(), *seed)?.run_to_end()).collect()
}

/// Continue a run from a checkpoint, appending to its metrics file.
pub fn resume(checkpoint: &std::path::Path) -> Result<SeedReport> {
    Runner::load(checkpoint)?.run_to_end()
}

/// Standalone pilot: roll the stabilizing policy from empty queues until its
/// time-average backlog settles, then estimate the threshold.
pub fn pilot_threshold(
    network: &NetworkConfig,
    seed: u64,
    opts: PilotOptions,
    omega: f64,
    rule: ThresholdRule,
) -> Result<(PilotRun, ThresholdEstimate)> {
    let mut env = Environment::new(network.clone(), seed)?;
    let mut rng = stream_rng(seed, Stream::Policy);
    let run = run_pilot(&mut env, BaselinePolicy::classical_for(network.kind), opts, &mut rng)?;
    let est = estimate_threshold(&run, omega, rule)?;
    Ok((run, est))
}
