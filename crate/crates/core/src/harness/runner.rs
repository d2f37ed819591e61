use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::metrics::{MetricsAccumulator, MetricsRow, METRICS_HEADER};
use super::{Controller, ExperimentConfig};
use crate::baselines::BaselinePolicy;
use crate::drift::{estimate_threshold, lyapunov, ConvergenceMonitor, InterventionGate, PilotRun};
use crate::env::{Action, Environment};
use crate::error::{Result, SqnError};
use crate::rng::{stream_rng, Stream};
use crate::train::{rollout, ActorCritic};

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Phase {
    Pilot { run: PilotRun, monitor: ConvergenceMonitor },
    Learn,
    Fixed,
}

/// Threshold estimates taken at the end of the pilot phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub steps: u64,
    pub converged: bool,
    pub point: f64,
    pub weighted: f64,
}

/// Final figures for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub steps: u64,
    pub final_time_avg: f64,
    pub final_moving_avg: Option<f64>,
    pub final_q_star: Option<f64>,
    pub pilot: Option<PilotSummary>,
    pub metrics_path: PathBuf,
}

/// Complete per-seed experiment state; serializing it is a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Runner {
    pub config: ExperimentConfig,
    pub seed: u64,
    env: Environment,
    policy_rng: ChaCha8Rng,
    agent: Option<ActorCritic>,
    gate: InterventionGate,
    metrics: MetricsAccumulator,
    episode: u64,
    phase: Phase,
    pilot: Option<PilotSummary>,
    last_moving_avg: Option<f64>,
}

impl Runner {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = Environment::new(config.network.clone(), seed)?;
        let policy_rng = stream_rng(seed, Stream::Policy);
        let mut init_rng = stream_rng(seed, Stream::Init);
        let (agent, phase, gate) = match config.controller {
            Controller::Fixed(_) => (None, Phase::Fixed, InterventionGate::disabled()),
            Controller::Learn(algo) => {
                let agent = ActorCritic::new(&config.network, config.train.lr, &mut init_rng);
                if algo.uses_gate() {
                    let potentials = vec![lyapunov(&env.state().q)];
                    let run = PilotRun { backlogs: Vec::new(), potentials, converged: false };
                    let monitor = ConvergenceMonitor::new(config.pilot.window, config.pilot.tol, config.train.episode_len);
                    let gate = InterventionGate::new(0.0, config.omega, config.gamma, config.r_min)?;
                    (Some(agent), Phase::Pilot { run, monitor }, gate)
                } else {
                    (Some(agent), Phase::Learn, InterventionGate::disabled())
                }
            }
        };
        Ok(Self {
            metrics: MetricsAccumulator::new(config.ma_window),
            config,
            seed,
            env,
            policy_rng,
            agent,
            gate,
            episode: 0,
            phase,
            pilot: None,
            last_moving_avg: None,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.metrics.steps()
    }

    pub fn is_done(&self) -> bool {
        self.steps_done() >= self.config.total_steps
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn agent(&self) -> Option<&ActorCritic> {
        self.agent.as_ref()
    }

    pub fn gate(&self) -> &InterventionGate {
        &self.gate
    }

    pub fn pilot_summary(&self) -> Option<PilotSummary> {
        self.pilot
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.config.seed_dir().join(format!("seed_{}.csv", self.seed))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config.seed_dir().join(format!("seed_{}.ckpt.json", self.seed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    fn stabilizer(&self) -> BaselinePolicy {
        BaselinePolicy::classical_for(self.config.network.kind)
    }

    /// Run one episode and append its rows to `out`.
    pub fn run_episode<W: Write>(&mut self, out: &mut csv::Writer<W>) -> Result<()> {
        let len = (self.config.total_steps - self.steps_done()).min(self.config.train.episode_len as u64) as usize;
        if len == 0 {
            return Ok(());
        }
        match &self.phase {
            Phase::Fixed => {
                let Controller::Fixed(policy) = self.config.controller else { unreachable!() };
                let backlogs = self.run_fixed(policy, len, None)?;
                self.write_rows(out, &backlogs, &vec![false; len], 0.0, None)?;
            }
            Phase::Pilot { .. } => {
                let Phase::Pilot { mut run, mut monitor } = std::mem::replace(&mut self.phase, Phase::Learn) else { unreachable!() };
                let backlogs = self.run_fixed(self.stabilizer(), len, Some(&mut run))?;
                self.write_rows(out, &backlogs, &vec![true; len], 1.0, None)?;
                for b in &backlogs {
                    monitor.push(*b);
                }
                let converged = monitor.converged();
                if converged || self.episode >= self.config.pilot.max_episodes as u64 {
                    run.converged = converged;
                    self.finish_pilot(run)?;
                } else {
                    self.phase = Phase::Pilot { run, monitor };
                }
            }
            Phase::Learn => self.learn_episode(out, len)?,
        }
        Ok(())
    }

    /// Roll a fixed policy, optionally recording pilot statistics.
    fn run_fixed(&mut self, policy: BaselinePolicy, len: usize, mut pilot: Option<&mut PilotRun>) -> Result<Vec<u64>> {
        let mut backlogs = Vec::with_capacity(len);
        for _ in 0..len {
            let action: Action = policy.act(self.env.state(), self.env.config(), self.env.reachability(), &mut self.policy_rng);
            let outcome = self.env.step(&action)?;
            backlogs.push(outcome.cost);
            if let Some(run) = pilot.as_deref_mut() {
                run.backlogs.push(outcome.cost);
                run.potentials.push(lyapunov(&outcome.next_state.q));
            }
        }
        Ok(backlogs)
    }

    fn finish_pilot(&mut self, run: PilotRun) -> Result<()> {
        let est = estimate_threshold(&run, self.config.omega, self.config.threshold_rule)?;
        self.gate.q_star = est.weighted;
        self.pilot = Some(PilotSummary { steps: run.steps() as u64, converged: run.converged, point: est.point, weighted: est.weighted });
        if self.config.write_drift_tables {
            let path = self.config.seed_dir().join(format!("seed_{}_drift.csv", self.seed));
            est.table.write_csv(File::create(path)?)?;
        }
        self.phase = Phase::Learn;
        Ok(())
    }

    fn learn_episode<W: Write>(&mut self, out: &mut csv::Writer<W>, len: usize) -> Result<()> {
        let stabilizer = self.stabilizer();
        let agent = self.agent.as_ref().expect("learning phase without an agent");
        let q_star = self.gate.enabled.then_some(self.gate.q_star);
        let traj = rollout(&mut self.env, &agent.actor, stabilizer, &self.gate, len, &mut self.policy_rng)?;
        let backlogs: Vec<u64> = traj.steps.iter().map(|s| s.cost).collect();
        let flags: Vec<bool> = traj.steps.iter().map(|s| s.intervened).collect();
        let rate = traj.intervention_rate();
        self.write_rows(out, &backlogs, &flags, rate, q_star)?;
        let agent = self.agent.as_mut().unwrap();
        let before = agent.clone();
        let reach = self.env.reachability().map(|r| r.to_vec());
        if let Err(e) = agent.update(&traj, &self.config.train, self.env.config(), reach.as_deref(), &mut self.policy_rng) {
            *agent = before;
            out.flush()?;
            self.save(&self.checkpoint_path())?;
            return Err(e);
        }
        if self.gate.enabled {
            self.gate.update(rate);
        }
        Ok(())
    }

    fn write_rows<W: Write>(
        &mut self,
        out: &mut csv::Writer<W>,
        backlogs: &[u64],
        intervened: &[bool],
        int_rate: f64,
        q_star: Option<f64>,
    ) -> Result<()> {
        let eta_hat = backlogs.iter().map(|b| crate::env::shaped_cost(*b)).sum::<f64>() / backlogs.len() as f64;
        for (b, i) in backlogs.iter().zip(intervened) {
            let t = self.metrics.steps();
            let (time_avg, moving_avg) = self.metrics.push(*b);
            self.last_moving_avg = moving_avg;
            out.serialize(MetricsRow {
                t,
                backlog: *b,
                time_avg,
                moving_avg,
                intervened: *i as u8,
                episode: self.episode,
                int_rate,
                eta_hat,
                q_star,
            })?;
        }
        self.episode += 1;
        Ok(())
    }

    fn open_metrics(&self) -> Result<csv::Writer<BufWriter<File>>> {
        let path = self.metrics_path();
        let fresh = self.steps_done() == 0;
        if fresh {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(File::create(&path)?));
            w.write_record(METRICS_HEADER)?;
            return Ok(w);
        }
        truncate_rows(&path, self.steps_done())?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file)))
    }

    /// Drive the seed to `total_steps`, checkpointing periodically, and
    /// report the final figures.
    pub fn run_to_end(mut self) -> Result<SeedReport> {
        self.run_episodes(usize::MAX)?;
        Ok(self.report())
    }

    /// Run up to `n` more episodes, then flush and checkpoint.
    pub fn run_episodes(&mut self, n: usize) -> Result<()> {
        fs::create_dir_all(self.config.seed_dir())?;
        let mut out = self.open_metrics()?;
        let mut since = 0;
        let mut done = 0;
        while !self.is_done() && done < n {
            self.run_episode(&mut out)?;
            done += 1;
            since += 1;
            if self.config.checkpoint_every > 0 && since >= self.config.checkpoint_every {
                out.flush()?;
                self.save(&self.checkpoint_path())?;
                since = 0;
            }
        }
        out.flush()?;
        self.save(&self.checkpoint_path())
    }

    pub fn report(&self) -> SeedReport {
        SeedReport {
            seed: self.seed,
            steps: self.steps_done(),
            final_time_avg: self.metrics.time_average().unwrap_or(0.0),
            final_moving_avg: self.last_moving_avg,
            final_q_star: self.gate.enabled.then_some(self.gate.q_star),
            pilot: self.pilot,
            metrics_path: self.metrics_path(),
        }
    }
}

/// Keep the header and the first `rows` data lines of a metrics file.
fn truncate_rows(path: &Path, rows: u64) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    let mut kept = Vec::new();
    for line in reader.lines().take(rows as usize + 1) {
        kept.push(line?);
    }
    if kept.len() != rows as usize + 1 {
        return Err(SqnError::InvalidParameter(format!("{} has fewer than {rows} rows", path.display())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
