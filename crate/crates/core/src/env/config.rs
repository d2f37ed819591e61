//! Network instance description and its on-disk schema.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, SqnError};

const PROB_TOL: f64 = 1e-9;

/// Task family of a network instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    SingleHop,
    MultiHop,
}

/// A finite discrete distribution over nonnegative packet counts.
///
/// Sampling walks the cumulative distribution in the listed value order,
/// so the same uniform draw always maps to the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePmf {
    values: Vec<u32>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscretePmf {
    pub fn new(values: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(SqnError::InvalidConfig(format!(
                "pmf needs matching nonempty values/probs, got {} and {}",
                values.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SqnError::InvalidConfig(format!("negative or non-finite probability in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(SqnError::InvalidConfig(format!("probabilities {probs:?} sum to {total}, not 1")));
        }
        let mut seen = values.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != values.len() {
            return Err(SqnError::InvalidConfig(format!("duplicate values in {values:?}")));
        }
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self { values, probs, cumulative })
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Inverse-CDF lookup for a uniform draw `u` in [0, 1).
    pub fn sample_with(&self, u: f64) -> u32 {
        for (i, c) in self.cumulative.iter().enumerate() {
            if u < *c {
                return self.values[i];
            }
        }
        // Rounding left `u` past the last cumulative value: take the last
        // value that actually carries mass.
        let last = self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(self.values.len() - 1);
        self.values[last]
    }

    pub fn max_value(&self) -> u32 {
        self.values
            .iter()
            .zip(&self.probs)
            .filter(|(_, p)| **p > 0.0)
            .map(|(v, _)| *v)
            .max()
            .unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| *v as f64 * p).sum()
    }
}

/// A traffic class with 0-based node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficClass {
    pub id: usize,
    pub source: usize,
    pub destination: usize,
    pub arrivals: DiscretePmf,
}

/// A directed link with 0-based node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    pub capacity: DiscretePmf,
}

/// A validated network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub kind: NetworkKind,
    pub nodes: usize,
    pub classes: Vec<TrafficClass>,
    pub links: Vec<LinkSpec>,
}

/// Node reference as written in a config file: a 1-based id or `"BS"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum NodeRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    id: usize,
    source: NodeRef,
    destination: NodeRef,
    arrival_values: Vec<u32>,
    arrival_probs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    id: usize,
    start: NodeRef,
    end: NodeRef,
    capacity_values: Vec<u32>,
    capacity_probs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    name: Option<String>,
    kind: NetworkKind,
    #[serde(default)]
    nodes: Option<usize>,
    classes: Vec<RawClass>,
    links: Vec<RawLink>,
}

const BUILTIN: [(&str, &str); 4] = [
    ("sh1", include_str!("../../configs/sh1.toml")),
    ("sh2", include_str!("../../configs/sh2.toml")),
    ("mh1", include_str!("../../configs/mh1.toml")),
    ("mh2", include_str!("../../configs/mh2.toml")),
];

/// Names of the shipped network instances.
pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// Load one of the shipped instances (`sh1`, `sh2`, `mh1`, `mh2`).
pub fn builtin(name: &str) -> Result<NetworkConfig> {
    let lower = name.to_ascii_lowercase();
    BUILTIN
        .iter()
        .find(|(n, _)| *n == lower)
        .ok_or_else(|| SqnError::InvalidConfig(format!("unknown builtin network {name:?}")))
        .and_then(|(_, text)| load_config(text))
}

/// Resolve a builtin name or read a config file from disk.
pub fn resolve(name_or_path: &str) -> Result<NetworkConfig> {
    if builtin_names().any(|n| n.eq_ignore_ascii_case(name_or_path)) {
        return builtin(name_or_path);
    }
    load_config_file(name_or_path)
}

pub fn load_config_file(path: impl AsRef<Path>) -> Result<NetworkConfig> {
    let text = std::fs::read_to_string(path)?;
    load_config(&text)
}

/// Parse and validate a config document.
pub fn load_config(text: &str) -> Result<NetworkConfig> {
    let raw: RawConfig = toml::from_str(text)?;
    build(raw)
}

fn check_ids(ids: impl Iterator<Item = usize>, what: &str) -> Result<()> {
    let mut ids: Vec<usize> = ids.collect();
    ids.sort_unstable();
    for (i, id) in ids.iter().enumerate() {
        if *id != i + 1 {
            return Err(SqnError::InvalidConfig(format!(
                "{what} ids must be unique and cover 1..={}, got {ids:?}",
                ids.len()
            )));
        }
    }
    Ok(())
}

fn build(raw: RawConfig) -> Result<NetworkConfig> {
    if raw.classes.is_empty() || raw.links.is_empty() {
        return Err(SqnError::InvalidConfig("need at least one class and one link".into()));
    }
    check_ids(raw.classes.iter().map(|c| c.id), "class")?;
    check_ids(raw.links.iter().map(|l| l.id), "link")?;

    let num_classes = raw.classes.len();
    let nodes = match raw.kind {
        // K users plus the base station.
        NetworkKind::SingleHop => num_classes + 1,
        NetworkKind::MultiHop => {
            let mut max_id = 0;
            for r in raw.classes.iter().flat_map(|c| [&c.source, &c.destination]).chain(raw.links.iter().flat_map(|l| [&l.start, &l.end])) {
                match r {
                    NodeRef::Id(i) => max_id = max_id.max(*i),
                    NodeRef::Name(n) => {
                        return Err(SqnError::InvalidConfig(format!("named node {n:?} only valid in single-hop configs")))
                    }
                }
            }
            raw.nodes.unwrap_or(max_id).max(max_id)
        }
    };
    let resolve_node = |r: &NodeRef| -> Result<usize> {
        match r {
            NodeRef::Id(0) => Err(SqnError::InvalidConfig("node ids are 1-based".into())),
            NodeRef::Id(i) if *i <= nodes => Ok(i - 1),
            NodeRef::Id(i) => Err(SqnError::InvalidConfig(format!("node {i} out of range 1..={nodes}"))),
            NodeRef::Name(n) if n.eq_ignore_ascii_case("bs") && raw.kind == NetworkKind::SingleHop => Ok(nodes - 1),
            NodeRef::Name(n) => Err(SqnError::InvalidConfig(format!("unknown node name {n:?}"))),
        }
    };

    let mut classes = raw
        .classes
        .iter()
        .map(|c| {
            Ok(TrafficClass {
                id: c.id,
                source: resolve_node(&c.source)?,
                destination: resolve_node(&c.destination)?,
                arrivals: DiscretePmf::new(c.arrival_values.clone(), c.arrival_probs.clone())
                    .map_err(|e| SqnError::InvalidConfig(format!("class {}: {e}", c.id)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    classes.sort_by_key(|c| c.id);
    let mut links = raw
        .links
        .iter()
        .map(|l| {
            Ok(LinkSpec {
                id: l.id,
                start: resolve_node(&l.start)?,
                end: resolve_node(&l.end)?,
                capacity: DiscretePmf::new(l.capacity_values.clone(), l.capacity_probs.clone())
                    .map_err(|e| SqnError::InvalidConfig(format!("link {}: {e}", l.id)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    links.sort_by_key(|l| l.id);

    for c in &classes {
        if c.source == c.destination {
            return Err(SqnError::InvalidConfig(format!("class {} has source == destination", c.id)));
        }
    }
    for l in &links {
        if l.start == l.end {
            return Err(SqnError::InvalidConfig(format!("link {} is a self-loop", l.id)));
        }
    }

    let config = NetworkConfig {
        name: raw.name.unwrap_or_default(),
        kind: raw.kind,
        nodes,
        classes,
        links,
    };
    match config.kind {
        NetworkKind::SingleHop => validate_single_hop(&config)?,
        NetworkKind::MultiHop => {
            // Fails on any class whose destination cannot be reached.
            super::masks::reachability_mask(&config)?;
        }
    }
    Ok(config)
}

fn validate_single_hop(config: &NetworkConfig) -> Result<()> {
    let bs = config.nodes - 1;
    if config.links.len() != config.classes.len() {
        return Err(SqnError::InvalidConfig(format!(
            "single-hop needs one link per class, got {} links for {} classes",
            config.links.len(),
            config.classes.len()
        )));
    }
    for (c, l) in config.classes.iter().zip(&config.links) {
        if c.destination != bs || l.end != bs {
            return Err(SqnError::InvalidConfig(format!("single-hop class/link {} must end at the base station", c.id)));
        }
        if l.start != c.source || c.source == bs {
            return Err(SqnError::InvalidConfig(format!("link {} must start at class {} source", l.id, c.id)));
        }
    }
    Ok(())
}

impl NetworkConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    /// Rows of the queue matrix: users for single-hop, nodes for multi-hop.
    pub fn queue_rows(&self) -> usize {
        match self.kind {
            NetworkKind::SingleHop => self.classes.len(),
            NetworkKind::MultiHop => self.nodes,
        }
    }

    /// Columns of the queue matrix: 1 for single-hop, K for multi-hop.
    pub fn queue_cols(&self) -> usize {
        match self.kind {
            NetworkKind::SingleHop => 1,
            NetworkKind::MultiHop => self.classes.len(),
        }
    }

    /// Largest total number of packets that can arrive in one slot.
    pub fn max_slot_arrivals(&self) -> u64 {
        self.classes.iter().map(|c| c.arrivals.max_value() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sh1_matches_table() {
        let c = builtin("sh1").unwrap();
        assert_eq!(c.kind, NetworkKind::SingleHop);
        assert_eq!(c.num_classes(), 2);
        assert_eq!(c.num_links(), 2);
        assert_eq!(c.classes[0].arrivals.values(), &[0, 1]);
        assert_eq!(c.classes[0].arrivals.probs(), &[0.7, 0.3]);
        assert_eq!(c.links[1].capacity.values(), &[0, 1, 2]);
        assert_eq!(c.links[1].capacity.probs(), &[0.2, 0.5, 0.3]);
    }

    #[test]
    fn mh2_dimensions() {
        let c = builtin("mh2").unwrap();
        assert_eq!((c.num_classes(), c.num_links(), c.nodes), (4, 13, 8));
        assert_eq!(c.max_slot_arrivals(), 12);
    }

    #[test]
    fn all_builtins_load() {
        for n in builtin_names() {
            builtin(n).unwrap();
        }
    }

    #[test]
    fn probs_must_sum_to_one() {
        let text = include_str!("../../configs/sh1.toml").replace("[0.7, 0.3]", "[0.5, 0.4]");
        let err = load_config(&text).unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");
    }

    #[test]
    fn duplicate_class_ids_rejected() {
        let text = include_str!("../../configs/sh1.toml").replacen("id = 2", "id = 1", 1);
        assert!(matches!(load_config(&text), Err(SqnError::InvalidConfig(_))));
    }

    #[test]
    fn malformed_document_rejected() {
        assert!(matches!(load_config("kind = 3"), Err(SqnError::Parse(_))));
    }

    #[test]
    fn inverse_cdf_follows_listed_order() {
        let class1 = DiscretePmf::new(vec![0, 1], vec![0.7, 0.3]).unwrap();
        assert_eq!(class1.sample_with(0.65), 0);
        assert_eq!(class1.sample_with(0.95), 1);
        let link2 = DiscretePmf::new(vec![0, 1, 2], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(link2.sample_with(0.1), 0);
        assert_eq!(link2.sample_with(0.69), 1);
        let mh1_link3 = DiscretePmf::new(vec![0, 2], vec![0.2, 0.8]).unwrap();
        assert_eq!(mh1_link3.sample_with(0.5), 2);
    }

    #[test]
    fn zero_mass_values_never_sampled() {
        let p = DiscretePmf::new(vec![0, 3], vec![0.0, 1.0]).unwrap();
        for u in [0.0, 1e-12, 0.5, 0.999_999_999] {
            assert_eq!(p.sample_with(u), 3);
        }
        // u beyond a cumulative sum that rounded below one
        let q = DiscretePmf::new(vec![5, 7, 9], vec![0.3, 0.7, 0.0]).unwrap();
        assert_eq!(q.sample_with(0.999_999_999_999_999_9), 7);
    }
}
