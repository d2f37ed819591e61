use petgraph::algo::dijkstra;
use petgraph::graph::{DiGraph, NodeIndex};

use super::config::{NetworkConfig, NetworkKind};
use super::state::NetworkState;
use crate::error::{Result, SqnError};

/// Single-hop action mask over `[link 1, .., link K, Idle]`.
///
/// A link is allowed iff it has capacity and a nonempty queue; Idle is
/// allowed only when no link is.
pub fn work_conserving_mask(state: &NetworkState) -> Vec<bool> {
    let k = state.y.len();
    let mut mask: Vec<bool> = (0..k).map(|i| state.y[i] > 0 && state.q.get(i, 0) > 0).collect();
    let any = mask.iter().any(|b| *b);
    mask.push(!any);
    mask
}

/// Link/class routing mask, `mask[m][k]`.
///
/// Entry (m, k) is true iff class `k` can still reach its destination after
/// crossing link `m`. Errors if some class cannot leave its source at all.
pub fn reachability_mask(config: &NetworkConfig) -> Result<Vec<Vec<bool>>> {
    if config.kind != NetworkKind::MultiHop {
        return Err(SqnError::InvalidConfig("reachability mask is defined for multi-hop networks".into()));
    }
    // Reverse graph: distances from every node *to* a destination.
    let mut reverse = DiGraph::<(), u32>::new();
    let ids: Vec<NodeIndex> = (0..config.nodes).map(|_| reverse.add_node(())).collect();
    for l in &config.links {
        reverse.add_edge(ids[l.end], ids[l.start], 1);
    }
    let mut mask = vec![vec![false; config.num_classes()]; config.num_links()];
    for (k, class) in config.classes.iter().enumerate() {
        let reaches = dijkstra(&reverse, ids[class.destination], None, |e| *e.weight());
        for (m, link) in config.links.iter().enumerate() {
            mask[m][k] = reaches.contains_key(&ids[link.end]);
        }
        let leaves_source = config
            .links
            .iter()
            .enumerate()
            .any(|(m, l)| l.start == class.source && mask[m][k]);
        if !leaves_source {
            return Err(SqnError::InvalidConfig(format!(
                "class {} cannot reach its destination from its source",
                class.id
            )));
        }
    }
    Ok(mask)
}
