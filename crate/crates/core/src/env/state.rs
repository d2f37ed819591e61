use serde::{Deserialize, Serialize};

/// Dense row-major matrix of queue backlogs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
}

impl QueueMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<u64>) -> Self {
        assert_eq!(data.len(), rows * cols, "queue matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.data[row * self.cols + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut u64 {
        &mut self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.data
    }

    pub fn total(&self) -> u64 {
        self.data.iter().sum()
    }
}

/// Observed network state at the start of a slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Users × 1 for single-hop, nodes × classes for multi-hop.
    pub q: QueueMatrix,
    /// Current link capacities.
    pub y: Vec<u32>,
    pub t: u64,
}

impl NetworkState {
    /// Total backlog, the per-slot cost.
    pub fn backlog(&self) -> u64 {
        self.q.total()
    }
}

/// Multi-hop capacity allocation: `links × (classes + 1)` counts, column 0
/// holding the unused capacity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    links: usize,
    cols: usize,
    counts: Vec<u32>,
}

impl Allocation {
    pub fn zeros(links: usize, classes: usize) -> Self {
        Self { links, cols: classes + 1, counts: vec![0; links * (classes + 1)] }
    }

    /// All capacity left unused.
    pub fn idle(y: &[u32], classes: usize) -> Self {
        let mut a = Self::zeros(y.len(), classes);
        for (m, cap) in y.iter().enumerate() {
            a.row_mut(m)[0] = *cap;
        }
        a
    }

    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        let links = rows.len();
        let cols = rows.first().map_or(1, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged allocation");
        Self { links, cols, counts: rows.into_iter().flatten().collect() }
    }

    pub fn num_links(&self) -> usize {
        self.links
    }

    pub fn num_classes(&self) -> usize {
        self.cols - 1
    }

    pub fn row(&self, m: usize) -> &[u32] {
        &self.counts[m * self.cols..(m + 1) * self.cols]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [u32] {
        &mut self.counts[m * self.cols..(m + 1) * self.cols]
    }

    /// Capacity on link `m` allocated to class `k` (0-based).
    pub fn class(&self, m: usize, k: usize) -> u32 {
        self.row(m)[k + 1]
    }

    pub fn unused(&self, m: usize) -> u32 {
        self.row(m)[0]
    }
}

/// A control decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Single-hop: activate the 0-based link.
    Link(usize),
    /// Single-hop: activate nothing.
    Idle,
    /// Multi-hop: per-link capacity allocation.
    Route(Allocation),
}

/// Result of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: NetworkState,
    /// Backlog at the start of the slot.
    pub cost: u64,
    /// `-1 / (1 + cost)`.
    pub shaped_cost: f64,
    pub arrivals: Vec<u32>,
    pub delivered: Vec<u64>,
}

pub fn shaped_cost(backlog: u64) -> f64 {
    -1.0 / (1.0 + backlog as f64)
}
