//! Lyapunov drift statistics and the backlog-threshold intervention gate.
//!
//! A pilot trajectory under the stabilizing policy is bucketed by total
//! backlog; the per-bucket mean one-step change of the quadratic Lyapunov
//! function locates the backlog beyond which the drift stays below a
//! negative margin `omega`. Above that threshold the stabilizing policy takes
//! over from the learned actor.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use crate::baselines::BaselinePolicy;
use crate::env::{Environment, QueueMatrix};
use crate::error::{Result, SqnError};

/// `½ Σ q²` over every queue.
pub fn lyapunov(q: &QueueMatrix) -> f64 {
    0.5 * q.as_slice().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()
}

/// Tracks the running time-average backlog and decides when it has settled.
///
/// Converged at step `t` (a multiple of `check_every`, `t >= 2 * window`)
/// when the time-average at `t` differs from the one at `t - window` by at
/// most `tol` relative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceMonitor {
    pub window: usize,
    pub tol: f64,
    pub check_every: usize,
    prefix: Vec<u64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, tol: f64, check_every: usize) -> Self {
        Self { window: window.max(1), tol, check_every: check_every.max(1), prefix: vec![0] }
    }

    pub fn push(&mut self, backlog: u64) {
        let last = *self.prefix.last().unwrap();
        self.prefix.push(last + backlog);
    }

    pub fn len(&self) -> usize {
        self.prefix.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn average(&self, t: usize) -> f64 {
        self.prefix[t] as f64 / t as f64
    }

    pub fn converged(&self) -> bool {
        let t = self.len();
        if t < 2 * self.window || t % self.check_every != 0 {
            return false;
        }
        let now = self.average(t);
        let before = self.average(t - self.window);
        if now == 0.0 && before == 0.0 {
            return true;
        }
        (now - before).abs() <= self.tol * before.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PilotOptions {
    pub max_steps: usize,
    /// Relative tolerance on the time-average backlog.
    pub tol: f64,
    pub window: usize,
    /// Only test convergence at multiples of this (episode length).
    pub check_every: usize,
}

impl Default for PilotOptions {
    fn default() -> Self {
        Self { max_steps: 200_000, tol: 0.01, window: 10_000, check_every: 1 }
    }
}

/// Backlogs and potentials observed while running the stabilizing policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotRun {
    /// Backlog at the start of each step.
    pub backlogs: Vec<u64>,
    /// Lyapunov value at the start of each step plus the final state.
    pub potentials: Vec<f64>,
    pub converged: bool,
}

impl PilotRun {
    pub fn steps(&self) -> usize {
        self.backlogs.len()
    }

    pub fn drifts(&self) -> impl Iterator<Item = f64> + '_ {
        self.potentials.windows(2).map(|w| w[1] - w[0])
    }
}

/// Roll `policy` until the time-average backlog settles or `max_steps`.
pub fn run_pilot<R: Rng + ?Sized>(env: &mut Environment, policy: BaselinePolicy, opts: PilotOptions, rng: &mut R) -> Result<PilotRun> {
    let mut monitor = ConvergenceMonitor::new(opts.window, opts.tol, opts.check_every);
    let mut backlogs = Vec::new();
    let mut potentials = vec![lyapunov(&env.state().q)];
    let mut converged = false;
    while backlogs.len() < opts.max_steps {
        let action = policy.act(env.state(), env.config(), env.reachability(), rng);
        let out = env.step(&action)?;
        backlogs.push(out.cost);
        monitor.push(out.cost);
        potentials.push(lyapunov(&out.next_state.q));
        if monitor.converged() {
            converged = true;
            break;
        }
    }
    Ok(PilotRun { backlogs, potentials, converged })
}

/// Which crossing of `omega` defines the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Smallest backlog beyond which every estimate is below `omega`.
    LastCrossing,
    /// Largest backlog below which every estimate exceeds `omega`.
    FirstDip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub backlog: u64,
    pub count: u64,
    pub raw: f64,
    /// Absent for trimmed buckets.
    pub smoothed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub rows: Vec<DriftRow>,
}

impl DriftTable {
    /// Bucket drifts by integer backlog.
    pub fn from_samples(backlogs: &[u64], drifts: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut buckets: BTreeMap<u64, (u64, f64)> = BTreeMap::new();
        let mut n = 0;
        for (b, d) in backlogs.iter().zip(drifts) {
            let e = buckets.entry(*b).or_default();
            e.0 += 1;
            e.1 += d;
            n += 1;
        }
        if n == 0 {
            return Err(SqnError::EmptyTrajectory);
        }
        let rows = buckets
            .into_iter()
            .map(|(backlog, (count, sum))| DriftRow { backlog, count, raw: sum / count as f64, smoothed: None })
            .collect();
        let mut table = Self { rows };
        table.smooth();
        Ok(table)
    }

    /// Drop the top 5% of distinct backlog values, then a count-weighted
    /// moving average of length 10 (4 below, 5 above, shrinking at the ends).
    fn smooth(&mut self) {
        let n = self.rows.len();
        let drop = ((n as f64) * 0.05).ceil() as usize;
        let keep = n.saturating_sub(drop).max(1);
        let kept: Vec<(u64, f64)> = self.rows[..keep].iter().map(|r| (r.count, r.raw)).collect();
        for i in 0..keep {
            let lo = i.saturating_sub(4);
            let hi = (i + 5).min(keep - 1);
            let (w, s) = kept[lo..=hi].iter().fold((0.0, 0.0), |(w, s), (c, d)| (w + *c as f64, s + *c as f64 * d));
            self.rows[i].smoothed = Some(s / w);
        }
        for r in &mut self.rows[keep..] {
            r.smoothed = None;
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["backlog", "count", "raw", "smoothed"])?;
        for r in &self.rows {
            w.write_record([
                r.backlog.to_string(),
                r.count.to_string(),
                r.raw.to_string(),
                r.smoothed.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Apply `rule` to an ascending `(backlog, drift)` series.
pub fn threshold_from_series(series: &[(u64, f64)], omega: f64, rule: ThresholdRule) -> Option<u64> {
    match rule {
        ThresholdRule::FirstDip => series.iter().find(|(_, d)| *d <= omega).map(|(b, _)| *b),
        ThresholdRule::LastCrossing => {
            let (_, last_d) = *series.last()?;
            if last_d >= omega {
                return None;
            }
            Some(series.iter().rev().find(|(_, d)| *d >= omega).map_or(series[0].0, |(b, _)| *b))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub point: f64,
    pub weighted: f64,
    pub table: DriftTable,
}

/// Estimate the intervention threshold from a pilot run.
pub fn estimate_threshold(pilot: &PilotRun, omega: f64, rule: ThresholdRule) -> Result<ThresholdEstimate> {
    estimate_threshold_from(&pilot.backlogs, pilot.drifts(), omega, rule)
}

/// As [`estimate_threshold`], from explicit backlog and drift samples.
pub fn estimate_threshold_from(
    backlogs: &[u64],
    drifts: impl IntoIterator<Item = f64>,
    omega: f64,
    rule: ThresholdRule,
) -> Result<ThresholdEstimate> {
    if omega >= 0.0 {
        return Err(SqnError::InvalidParameter(format!("omega must be negative, got {omega}")));
    }
    let table = DriftTable::from_samples(backlogs, drifts)?;
    if table.rows.iter().all(|r| r.raw > 0.0) {
        return Err(SqnError::NotStabilizing);
    }
    let fallback = percentile(backlogs, 0.95);
    let raw: Vec<(u64, f64)> = table.rows.iter().map(|r| (r.backlog, r.raw)).collect();
    let smooth: Vec<(u64, f64)> = table.rows.iter().filter_map(|r| r.smoothed.map(|s| (r.backlog, s))).collect();
    let point = threshold_from_series(&raw, omega, rule).map_or(fallback, |b| b as f64);
    let weighted = threshold_from_series(&smooth, omega, rule).map_or(fallback, |b| b as f64);
    Ok(ThresholdEstimate { point, weighted, table })
}

fn percentile(values: &[u64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx] as f64
}

/// Intervention criterion: hand control to the stabilizing policy once the
/// total backlog exceeds `q_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionGate {
    pub q_star: f64,
    pub omega: f64,
    pub gamma: f64,
    pub r_min: f64,
    pub enabled: bool,
}

impl InterventionGate {
    pub fn new(q_star: f64, omega: f64, gamma: f64, r_min: f64) -> Result<Self> {
        if omega >= 0.0 {
            return Err(SqnError::InvalidParameter(format!("omega must be negative, got {omega}")));
        }
        if !(0.0..=1.0).contains(&r_min) || gamma < 0.0 {
            return Err(SqnError::InvalidParameter(format!("need r_min in [0,1] and gamma >= 0, got {r_min}, {gamma}")));
        }
        Ok(Self { q_star, omega, gamma, r_min, enabled: true })
    }

    /// A gate that never intervenes.
    pub fn disabled() -> Self {
        Self { q_star: 0.0, omega: -0.1, gamma: 0.0, r_min: 0.0, enabled: false }
    }

    pub fn intervene(&self, backlog: u64) -> bool {
        self.enabled && backlog as f64 > self.q_star
    }

    /// `q* += gamma (1 - R)` when the intervention rate `R` exceeds `r_min`.
    pub fn update(&mut self, rate: f64) {
        if rate > self.r_min {
            self.q_star += self.gamma * (1.0 - rate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::builtin;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    #[test]
    fn lyapunov_values() {
        assert_eq!(lyapunov(&QueueMatrix::zeros(3, 2)), 0.0);
        assert_eq!(lyapunov(&QueueMatrix::from_rows(2, 1, vec![3, 4])), 12.5);
    }

    proptest! {
        #[test]
        fn lyapunov_monotone(q in proptest::collection::vec(0u64..1000, 6), bump in proptest::collection::vec(0u64..50, 6)) {
            let a = QueueMatrix::from_rows(3, 2, q.clone());
            let b = QueueMatrix::from_rows(3, 2, q.iter().zip(&bump).map(|(x, d)| x + d).collect());
            prop_assert!(lyapunov(&b) >= lyapunov(&a));
        }

        #[test]
        fn threshold_nondecreasing(start in 0.0f64..100.0, gamma in 0.0f64..5.0, rates in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let mut g = InterventionGate::new(start, -0.1, gamma, 0.05).unwrap();
            for r in rates {
                let before = g.q_star;
                g.update(r);
                prop_assert!(g.q_star >= before);
            }
        }
    }

    /// Linear synthetic drift (10 - q)/10, one sample per backlog in 0..=40
    /// so each bucket mean is the exact line value.
    fn linear_samples() -> (Vec<u64>, Vec<f64>) {
        (0..=40u64).map(|q| (q, (10.0 - q as f64) / 10.0)).unzip()
    }

    #[test]
    fn linear_drift_point_threshold() {
        // Oracle: (10 - q)/10 > -0.1 exactly when q < 11.
        let (b, d) = linear_samples();
        for rule in [ThresholdRule::FirstDip, ThresholdRule::LastCrossing] {
            let est = estimate_threshold_from(&b, d.iter().copied(), -0.1, rule).unwrap();
            assert_eq!(est.point, 11.0, "{rule:?}");
        }
    }

    #[test]
    fn linear_drift_weighted_threshold() {
        // Oracle: with equal counts the window over q-4..=q+5 averages the
        // line at q + 0.5, giving (9.5 - q)/10: -0.05 at q = 10, -0.15 at 11.
        let (b, d) = linear_samples();
        let est = estimate_threshold_from(&b, d.iter().copied(), -0.1, ThresholdRule::FirstDip).unwrap();
        assert_eq!(est.weighted, 11.0);
        let est = estimate_threshold_from(&b, d.iter().copied(), -0.1, ThresholdRule::LastCrossing).unwrap();
        assert_eq!(est.weighted, 10.0);
        let s10 = est.table.rows[10].smoothed.unwrap();
        assert!((s10 + 0.05).abs() < 1e-12, "{s10}");
    }

    #[test]
    fn trimming_drops_top_five_percent() {
        let (b, d) = linear_samples();
        let est = estimate_threshold_from(&b, d, -0.1, ThresholdRule::LastCrossing).unwrap();
        // 41 distinct values, drop ceil(2.05) = 3
        let trimmed = est.table.rows.iter().filter(|r| r.smoothed.is_none()).map(|r| r.backlog).collect::<Vec<_>>();
        assert_eq!(trimmed, vec![38, 39, 40]);
    }

    #[test]
    fn all_positive_drift_is_error() {
        let pilot = PilotRun { backlogs: vec![0, 1, 2], potentials: vec![0.0, 0.5, 2.0, 4.5], converged: false };
        assert!(matches!(estimate_threshold(&pilot, -0.1, ThresholdRule::LastCrossing), Err(SqnError::NotStabilizing)));
    }

    #[test]
    fn empty_pilot_is_error() {
        let pilot = PilotRun { backlogs: vec![], potentials: vec![0.0], converged: false };
        assert!(matches!(estimate_threshold(&pilot, -0.1, ThresholdRule::LastCrossing), Err(SqnError::EmptyTrajectory)));
    }

    #[test]
    fn gate_examples() {
        let g = InterventionGate::new(10.0, -0.1, 1.0, 0.1).unwrap();
        assert!(!g.intervene(5));
        assert!(!g.intervene(10));
        assert!(g.intervene(11));
        assert!(!InterventionGate::disabled().intervene(u64::MAX));
    }

    #[test]
    fn update_examples() {
        let mut g = InterventionGate::new(20.0, -0.1, 1.0, 0.1).unwrap();
        g.update(0.5);
        assert_eq!(g.q_star, 20.5);
        g.update(0.05);
        assert_eq!(g.q_star, 20.5);
        g.update(1.0);
        assert_eq!(g.q_star, 20.5);
    }

    #[test]
    fn positive_omega_rejected() {
        assert!(InterventionGate::new(1.0, 0.1, 1.0, 0.1).is_err());
    }

    #[test]
    fn pilot_converges_on_zero_arrivals() {
        let text = include_str!("../configs/sh1.toml").replace("[0.7, 0.3]", "[1.0, 0.0]").replace("[0.3, 0.7]", "[1.0, 0.0]");
        let mut env = Environment::new(crate::env::load_config(&text).unwrap(), 1).unwrap();
        let mut rng = stream_rng(1, Stream::Policy);
        let run = run_pilot(&mut env, BaselinePolicy::MaxWeight, PilotOptions { window: 100, ..Default::default() }, &mut rng).unwrap();
        assert!(run.converged);
        assert_eq!(run.steps(), 200);
    }

    #[test]
    fn pilot_maxweight_sh1_converges() {
        let mut env = Environment::new(builtin("sh1").unwrap(), 3).unwrap();
        let mut rng = stream_rng(3, Stream::Policy);
        let run = run_pilot(&mut env, BaselinePolicy::MaxWeight, PilotOptions::default(), &mut rng).unwrap();
        assert!(run.converged);
        assert!(run.steps() < 200_000);
    }

    #[test]
    fn pilot_random_sh2_does_not_converge() {
        let mut env = Environment::new(builtin("sh2").unwrap(), 3).unwrap();
        let mut rng = stream_rng(3, Stream::Policy);
        let run = run_pilot(&mut env, BaselinePolicy::Randomized, PilotOptions::default(), &mut rng).unwrap();
        assert!(!run.converged);
        assert_eq!(run.steps(), 200_000);
    }
}
