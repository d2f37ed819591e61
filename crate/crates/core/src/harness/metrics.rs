use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Running prefix mean: entry `t` averages the first `t + 1` values.
pub fn time_average(series: &[u64]) -> Vec<f64> {
    let mut sum = 0u64;
    series
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum as f64 / (i + 1) as f64
        })
        .collect()
}

/// Trailing mean over exactly `window` values, one entry per full window.
pub fn moving_average(series: &[u64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be positive");
    if window > series.len() {
        return Vec::new();
    }
    let mut sum: u64 = series[..window].iter().sum();
    let mut out = vec![sum as f64 / window as f64];
    for i in window..series.len() {
        sum = sum + series[i] - series[i - window];
        out.push(sum as f64 / window as f64);
    }
    out
}

/// One line of the per-seed metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: u64,
    pub backlog: u64,
    pub time_avg: f64,
    pub moving_avg: Option<f64>,
    pub intervened: u8,
    pub episode: u64,
    pub int_rate: f64,
    pub eta_hat: f64,
    pub q_star: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = ["t", "backlog", "time_avg", "moving_avg", "intervened", "episode", "int_rate", "eta_hat", "q_star"];

/// Incremental time and moving averages with integer sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    window: usize,
    count: u64,
    sum: u64,
    recent: VecDeque<u64>,
    recent_sum: u64,
}

impl MetricsAccumulator {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), count: 0, sum: 0, recent: VecDeque::with_capacity(window), recent_sum: 0 }
    }

    /// Record a backlog and return `(time_avg, moving_avg)` including it.
    pub fn push(&mut self, backlog: u64) -> (f64, Option<f64>) {
        self.count += 1;
        self.sum += backlog;
        self.recent.push_back(backlog);
        self.recent_sum += backlog;
        if self.recent.len() > self.window {
            self.recent_sum -= self.recent.pop_front().unwrap();
        }
        let ma = (self.recent.len() == self.window).then(|| self.recent_sum as f64 / self.window as f64);
        (self.sum as f64 / self.count as f64, ma)
    }

    pub fn steps(&self) -> u64 {
        self.count
    }

    pub fn time_average(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}
