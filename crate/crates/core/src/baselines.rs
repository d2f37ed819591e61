//! Classical stabilizing policies: MaxWeight, Backpressure, and a uniform
//! randomized policy. Ties always go to the lowest index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{work_conserving_mask, Action, Allocation, NetworkConfig, NetworkKind, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselinePolicy {
    MaxWeight,
    Backpressure,
    Randomized,
}

impl BaselinePolicy {
    /// The stabilizing policy for a network kind.
    pub fn classical_for(kind: NetworkKind) -> Self {
        match kind {
            NetworkKind::SingleHop => Self::MaxWeight,
            NetworkKind::MultiHop => Self::Backpressure,
        }
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &NetworkState,
        config: &NetworkConfig,
        reach: Option<&[Vec<bool>]>,
        rng: &mut R,
    ) -> Action {
        match self {
            Self::MaxWeight => max_weight(state),
            Self::Backpressure => backpressure(state, config, reach.expect("backpressure needs a reachability mask")),
            Self::Randomized => randomized_policy(state, config, reach, rng),
        }
    }
}

/// Activate the valid link maximizing `q_k * y_k`; Idle if none is valid.
pub fn max_weight(state: &NetworkState) -> Action {
    let mask = work_conserving_mask(state);
    let mut best: Option<(usize, u64)> = None;
    for (k, &cap) in state.y.iter().enumerate() {
        if !mask[k] {
            continue;
        }
        let w = state.q.get(k, 0) * cap as u64;
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((k, w));
        }
    }
    best.map_or(Action::Idle, |(k, _)| Action::Link(k))
}

/// Give each link's whole capacity to the allowed class with the largest
/// positive backlog differential across it.
pub fn backpressure(state: &NetworkState, config: &NetworkConfig, reach: &[Vec<bool>]) -> Action {
    let k = config.num_classes();
    let mut alloc = Allocation::idle(&state.y, k);
    for (m, link) in config.links.iter().enumerate() {
        let mut best: Option<(usize, i64)> = None;
        for (c, class) in config.classes.iter().enumerate() {
            if !reach[m][c] {
                continue;
            }
            let downstream = if link.end == class.destination { 0 } else { state.q.get(link.end, c) as i64 };
            let diff = state.q.get(link.start, c) as i64 - downstream;
            if best.is_none_or(|(_, bd)| diff > bd) {
                best = Some((c, diff));
            }
        }
        if let Some((c, diff)) = best {
            if diff > 0 {
                let row = alloc.row_mut(m);
                row[0] = 0;
                row[c + 1] = state.y[m];
            }
        }
    }
    Action::Route(alloc)
}

/// Uniform over valid single-hop actions; for multi-hop, each unit of link
/// capacity goes uniformly to an allowed class or stays unused.
pub fn randomized_policy<R: Rng + ?Sized>(
    state: &NetworkState,
    config: &NetworkConfig,
    reach: Option<&[Vec<bool>]>,
    rng: &mut R,
) -> Action {
    match config.kind {
        NetworkKind::SingleHop => {
            let mask = work_conserving_mask(state);
            let valid: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
            let pick = valid[rng.random_range(0..valid.len())];
            if pick == config.num_classes() {
                Action::Idle
            } else {
                Action::Link(pick)
            }
        }
        NetworkKind::MultiHop => {
            let reach = reach.expect("multi-hop randomized policy needs a reachability mask");
            let k = config.num_classes();
            let mut alloc = Allocation::zeros(config.num_links(), k);
            for m in 0..config.num_links() {
                // column 0 (unused) is always a candidate
                let choices: Vec<usize> = std::iter::once(0).chain((0..k).filter(|c| reach[m][*c]).map(|c| c + 1)).collect();
                let row = alloc.row_mut(m);
                for _ in 0..state.y[m] {
                    row[choices[rng.random_range(0..choices.len())]] += 1;
                }
            }
            Action::Route(alloc)
        }
    }
}
