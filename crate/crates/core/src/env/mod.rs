//! Time-slotted queueing network dynamics.
//!
//! Within a slot the order is: observe `(q, y)`, act, transmit, add
//! arrivals, resample link states. Packets move at most one hop per slot and
//! leave the network on reaching their destination.

pub mod config;
pub mod masks;
pub mod state;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{builtin, load_config, load_config_file, resolve, DiscretePmf, LinkSpec, NetworkConfig, NetworkKind, TrafficClass};
pub use masks::{reachability_mask, work_conserving_mask};
pub use state::{shaped_cost, Action, Allocation, NetworkState, QueueMatrix, StepOutcome};

use crate::error::{Result, SqnError};
use crate::rng::{stream_rng, Stream};

/// One uniform draw per class, inverse-CDF over the listed values.
pub fn sample_arrivals<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Vec<u32> {
    config.classes.iter().map(|c| c.arrivals.sample_with(rng.random::<f64>())).collect()
}

/// One uniform draw per link, independent of the queue state.
pub fn sample_link_states<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Vec<u32> {
    config.links.iter().map(|l| l.capacity.sample_with(rng.random::<f64>())).collect()
}

fn check_dims(config: &NetworkConfig, state: &NetworkState, arrivals: &[u32], next_y: &[u32]) -> Result<()> {
    let expect = [
        (config.queue_rows(), state.q.rows()),
        (config.queue_cols(), state.q.cols()),
        (config.num_links(), state.y.len()),
        (config.num_classes(), arrivals.len()),
        (config.num_links(), next_y.len()),
    ];
    for (expected, got) in expect {
        if expected != got {
            return Err(SqnError::Dimension { expected, got });
        }
    }
    Ok(())
}

/// Single-hop slot with given arrivals and next link states.
///
/// Activating link `k` sends `min(q_k, y_k)` packets to the base station.
pub fn single_hop_transition(
    config: &NetworkConfig,
    state: &NetworkState,
    action: &Action,
    arrivals: &[u32],
    next_y: Vec<u32>,
) -> Result<StepOutcome> {
    if config.kind != NetworkKind::SingleHop {
        return Err(SqnError::InvalidAction("single-hop transition on a multi-hop network".into()));
    }
    check_dims(config, state, arrivals, &next_y)?;
    let k = config.num_classes();
    let cost = state.backlog();
    let mut q = state.q.clone();
    let mut delivered = vec![0u64; k];
    match action {
        Action::Idle => {}
        Action::Link(link) if *link < k => {
            let sent = q.get(*link, 0).min(state.y[*link] as u64);
            *q.get_mut(*link, 0) -= sent;
            delivered[*link] = sent;
        }
        Action::Link(link) => {
            return Err(SqnError::InvalidAction(format!("link index {link} out of range for {k} links")));
        }
        Action::Route(_) => return Err(SqnError::InvalidAction("multi-hop action passed to single-hop network".into())),
    }
    for (user, x) in arrivals.iter().enumerate() {
        *q.get_mut(user, 0) += *x as u64;
    }
    Ok(StepOutcome {
        next_state: NetworkState { q, y: next_y, t: state.t + 1 },
        cost,
        shaped_cost: shaped_cost(cost),
        arrivals: arrivals.to_vec(),
        delivered,
    })
}

/// Multi-hop slot with given arrivals and next link states.
///
/// Each allocation row must sum to the link's capacity. Allocations beyond
/// the queue content are truncated, processing links then classes in
/// ascending order.
pub fn multi_hop_transition(
    config: &NetworkConfig,
    state: &NetworkState,
    action: &Action,
    arrivals: &[u32],
    next_y: Vec<u32>,
) -> Result<StepOutcome> {
    if config.kind != NetworkKind::MultiHop {
        return Err(SqnError::InvalidAction("multi-hop transition on a single-hop network".into()));
    }
    check_dims(config, state, arrivals, &next_y)?;
    let Action::Route(alloc) = action else {
        return Err(SqnError::InvalidAction("single-hop action passed to multi-hop network".into()));
    };
    let k = config.num_classes();
    if alloc.num_links() != config.num_links() || alloc.num_classes() != k {
        return Err(SqnError::InvalidAction(format!(
            "allocation is {}x{}, expected {}x{}",
            alloc.num_links(),
            alloc.num_classes() + 1,
            config.num_links(),
            k + 1
        )));
    }
    for m in 0..config.num_links() {
        let total: u64 = alloc.row(m).iter().map(|a| *a as u64).sum();
        if total != state.y[m] as u64 {
            return Err(SqnError::InvalidAction(format!(
                "link {} allocation sums to {total}, capacity is {}",
                m + 1,
                state.y[m]
            )));
        }
    }

    let cost = state.backlog();
    let mut q = state.q.clone();
    let mut incoming = QueueMatrix::zeros(config.nodes, k);
    let mut delivered = vec![0u64; k];
    for (m, link) in config.links.iter().enumerate() {
        for (c, class) in config.classes.iter().enumerate() {
            let queued = q.get_mut(link.start, c);
            let sent = (*queued).min(alloc.class(m, c) as u64);
            *queued -= sent;
            if link.end == class.destination {
                delivered[c] += sent;
            } else {
                *incoming.get_mut(link.end, c) += sent;
            }
        }
    }
    for n in 0..config.nodes {
        for c in 0..k {
            *q.get_mut(n, c) += incoming.get(n, c);
        }
    }
    for (c, x) in arrivals.iter().enumerate() {
        *q.get_mut(config.classes[c].source, c) += *x as u64;
    }
    Ok(StepOutcome {
        next_state: NetworkState { q, y: next_y, t: state.t + 1 },
        cost,
        shaped_cost: shaped_cost(cost),
        arrivals: arrivals.to_vec(),
        delivered,
    })
}

/// A live network: configuration, current state and its two exogenous
/// random streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    config: NetworkConfig,
    reach: Option<Vec<Vec<bool>>>,
    state: NetworkState,
    arrivals_rng: ChaCha8Rng,
    links_rng: ChaCha8Rng,
}

impl Environment {
    /// Empty queues, first link states drawn from the link stream.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let reach = match config.kind {
            NetworkKind::MultiHop => Some(reachability_mask(&config)?),
            NetworkKind::SingleHop => None,
        };
        let arrivals_rng = stream_rng(seed, Stream::Arrivals);
        let mut links_rng = stream_rng(seed, Stream::LinkStates);
        let y = sample_link_states(&config, &mut links_rng);
        let state = NetworkState { q: QueueMatrix::zeros(config.queue_rows(), config.queue_cols()), y, t: 0 };
        Ok(Self { config, reach, state, arrivals_rng, links_rng })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    /// Replace the current state (tests and warm starts).
    pub fn set_state(&mut self, state: NetworkState) {
        self.state = state;
    }

    /// Routing mask for multi-hop networks.
    pub fn reachability(&self) -> Option<&[Vec<bool>]> {
        self.reach.as_deref()
    }

    /// Execute `action` for one slot and advance the state.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let arrivals = sample_arrivals(&self.config, &mut self.arrivals_rng);
        let next_y = sample_link_states(&self.config, &mut self.links_rng);
        let outcome = match self.config.kind {
            NetworkKind::SingleHop => single_hop_transition(&self.config, &self.state, action, &arrivals, next_y)?,
            NetworkKind::MultiHop => multi_hop_transition(&self.config, &self.state, action, &arrivals, next_y)?,
        };
        self.state = outcome.next_state.clone();
        Ok(outcome)
    }
}
