//! Stochastic action heads on top of actor logits.
//!
//! Single-hop networks use a masked categorical over `[link 1, .., link K,
//! Idle]`. Multi-hop networks use one multinomial per link whose trials are
//! the link capacity and whose outcomes are `[unused, class 1, .., class K]`,
//! so every sample satisfies the capacity equality exactly.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::env::{work_conserving_mask, Action, Allocation, NetworkConfig, NetworkKind, NetworkState};
use crate::error::{Result, SqnError};
use crate::nn::{symlog, Mlp};

/// Logit assigned to invalid entries.
pub const MASK_VALUE: f64 = -1e9;

/// Probabilities below this are treated as exactly zero when sampling.
const LEAK: f64 = 1e-300;

pub fn mask_logits(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(SqnError::Dimension { expected: logits.len(), got: mask.len() });
    }
    if !mask.iter().any(|m| *m) {
        return Err(SqnError::EmptyMask);
    }
    Ok(logits.iter().zip(mask).map(|(l, m)| if *m { *l } else { MASK_VALUE }).collect())
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p < LEAK {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Categorical distribution with invalid entries forced to probability 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCategorical {
    mask: Vec<bool>,
    log_probs: Vec<f64>,
}

impl MaskedCategorical {
    pub fn new(logits: &[f64], mask: &[bool]) -> Result<Self> {
        let masked = mask_logits(logits, mask)?;
        Ok(Self { mask: mask.to_vec(), log_probs: log_softmax(&masked) })
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().zip(&self.mask).map(|(lp, m)| if *m { lp.exp() } else { 0.0 }).collect()
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        self.log_probs[index]
    }

    /// Inverse-CDF draw for a given uniform.
    pub fn sample_with(&self, u: f64) -> (usize, f64) {
        let i = inverse_cdf(&self.probs(), u);
        (i, self.log_probs[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        self.sample_with(rng.random::<f64>())
    }

    /// Log-probability of `index` and its gradient with respect to the raw
    /// (unmasked) logits. Masked entries get zero gradient.
    pub fn log_prob_grad(&self, index: usize) -> Result<(f64, Vec<f64>)> {
        if !self.mask[index] {
            return Err(SqnError::ImpossibleOutcome);
        }
        let grad = self
            .probs()
            .iter()
            .enumerate()
            .map(|(j, p)| if !self.mask[j] { 0.0 } else if j == index { 1.0 - p } else { -p })
            .collect();
        Ok((self.log_probs[index], grad))
    }
}

/// Multinomial over `[unused, class 1, .., class K]` for one link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMultinomial {
    mask: Vec<bool>,
    log_probs: Vec<f64>,
    trials: u32,
}

impl LinkMultinomial {
    /// `class_mask` has length K; the unused column is always allowed.
    pub fn new(logits: &[f64], trials: u32, class_mask: &[bool]) -> Result<Self> {
        let mask: Vec<bool> = std::iter::once(true).chain(class_mask.iter().copied()).collect();
        let masked = mask_logits(logits, &mask)?;
        Ok(Self { mask, log_probs: log_softmax(&masked), trials })
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().zip(&self.mask).map(|(lp, m)| if *m { lp.exp() } else { 0.0 }).collect()
    }

    /// `trials` independent categorical draws accumulated into counts.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        let probs = self.probs();
        let mut row = vec![0u32; probs.len()];
        for _ in 0..self.trials {
            row[inverse_cdf(&probs, rng.random::<f64>())] += 1;
        }
        row
    }

    /// Multinomial log-pmf of `row` and its gradient `A - n p` with respect
    /// to the raw logits.
    pub fn log_prob(&self, row: &[u32]) -> Result<(f64, Vec<f64>)> {
        if row.len() != self.log_probs.len() {
            return Err(SqnError::Dimension { expected: self.log_probs.len(), got: row.len() });
        }
        let n: u32 = row.iter().sum();
        if n != self.trials {
            return Err(SqnError::InvalidAction(format!("row sums to {n}, expected {}", self.trials)));
        }
        if row.iter().zip(&self.mask).any(|(a, m)| *a > 0 && !m) {
            return Err(SqnError::ImpossibleOutcome);
        }
        let mut lp = ln_factorial(n);
        for (a, l) in row.iter().zip(&self.log_probs) {
            if *a > 0 {
                lp += *a as f64 * l - ln_factorial(*a);
            }
        }
        let probs = self.probs();
        let grad = row
            .iter()
            .zip(&probs)
            .zip(&self.mask)
            .map(|((a, p), m)| if *m { *a as f64 - n as f64 * p } else { 0.0 })
            .collect();
        Ok((lp, grad))
    }
}

fn ln_factorial(n: u32) -> f64 {
    if n < 2 {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// Sample a full allocation, one multinomial per link.
pub fn multinomial_sample<R: Rng + ?Sized>(heads: &[LinkMultinomial], rng: &mut R) -> Result<(Allocation, f64)> {
    let rows: Vec<Vec<u32>> = heads.iter().map(|h| h.sample(rng)).collect();
    let mut total = 0.0;
    for (h, r) in heads.iter().zip(&rows) {
        total += h.log_prob(r)?.0;
    }
    Ok((Allocation::from_rows(rows), total))
}

/// Per-state action distribution produced by the actor.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyDist {
    Categorical(MaskedCategorical),
    Multinomial(Vec<LinkMultinomial>),
}

impl PolicyDist {
    /// Build the head for `state` from a raw logit vector.
    pub fn from_logits(logits: &[f64], state: &NetworkState, config: &NetworkConfig, reach: Option<&[Vec<bool>]>) -> Result<Self> {
        let expected = actor_output_dim(config);
        if logits.len() != expected {
            return Err(SqnError::Dimension { expected, got: logits.len() });
        }
        match config.kind {
            NetworkKind::SingleHop => Ok(Self::Categorical(MaskedCategorical::new(logits, &work_conserving_mask(state))?)),
            NetworkKind::MultiHop => {
                let reach = reach.ok_or_else(|| SqnError::InvalidConfig("multi-hop head needs a reachability mask".into()))?;
                let cols = config.num_classes() + 1;
                logits
                    .chunks_exact(cols)
                    .enumerate()
                    .map(|(m, chunk)| LinkMultinomial::new(chunk, state.y[m], &reach[m]))
                    .collect::<Result<Vec<_>>>()
                    .map(Self::Multinomial)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Action, f64)> {
        match self {
            Self::Categorical(head) => {
                let (i, lp) = head.sample(rng);
                let k = head.mask.len() - 1;
                Ok((if i == k { Action::Idle } else { Action::Link(i) }, lp))
            }
            Self::Multinomial(heads) => {
                let (alloc, lp) = multinomial_sample(heads, rng)?;
                Ok((Action::Route(alloc), lp))
            }
        }
    }

    /// Log-probability of `action` and its gradient with respect to the full
    /// raw logit vector.
    pub fn log_prob_grad(&self, action: &Action) -> Result<(f64, Vec<f64>)> {
        match (self, action) {
            (Self::Categorical(head), Action::Link(i)) => head.log_prob_grad(*i),
            (Self::Categorical(head), Action::Idle) => head.log_prob_grad(head.mask.len() - 1),
            (Self::Multinomial(heads), Action::Route(alloc)) => {
                if alloc.num_links() != heads.len() {
                    return Err(SqnError::Dimension { expected: heads.len(), got: alloc.num_links() });
                }
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(heads.len() * (alloc.num_classes() + 1));
                for (m, h) in heads.iter().enumerate() {
                    let (lp, g) = h.log_prob(alloc.row(m))?;
                    total += lp;
                    grad.extend(g);
                }
                Ok((total, grad))
            }
            _ => Err(SqnError::InvalidAction("action kind does not match policy head".into())),
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        self.log_prob_grad(action).map(|(lp, _)| lp)
    }
}

/// Symlog of the flattened queue matrix followed by the link states.
pub fn encode_state(state: &NetworkState) -> Vec<f64> {
    let raw: Vec<f64> = state.q.as_slice().iter().map(|v| *v as f64).chain(state.y.iter().map(|v| *v as f64)).collect();
    symlog(&raw)
}

pub fn state_dim(config: &NetworkConfig) -> usize {
    config.queue_rows() * config.queue_cols() + config.num_links()
}

pub fn actor_output_dim(config: &NetworkConfig) -> usize {
    match config.kind {
        NetworkKind::SingleHop => config.num_classes() + 1,
        NetworkKind::MultiHop => config.num_links() * (config.num_classes() + 1),
    }
}

/// Evaluate the actor on `state` and wrap its logits in the matching head.
pub fn actor_forward(actor: &Mlp, state: &NetworkState, config: &NetworkConfig, reach: Option<&[Vec<bool>]>) -> Result<PolicyDist> {
    let logits = actor.forward(&encode_state(state))?;
    PolicyDist::from_logits(&logits, state, config, reach)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{builtin, reachability_mask, QueueMatrix};
    use crate::rng::{stream_rng, Stream};
    use std::f64::consts::{E, LN_2};

    /// Exact multinomial pmf by direct factorial arithmetic.
    fn pmf_oracle(probs: &[f64], row: &[u32]) -> f64 {
        let fact = |n: u32| (1..=n).map(|i| i as f64).product::<f64>();
        let n: u32 = row.iter().sum();
        fact(n) / row.iter().map(|a| fact(*a)).product::<f64>() * row.iter().zip(probs).map(|(a, p)| p.powi(*a as i32)).product::<f64>()
    }

    /// All nonnegative integer rows of length `len` summing to `n`.
    fn compositions(n: u32, len: usize) -> Vec<Vec<u32>> {
        if len == 1 {
            return vec![vec![n]];
        }
        (0..=n)
            .flat_map(|first| compositions(n - first, len - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            }))
            .collect()
    }

    #[test]
    fn mask_logits_examples() {
        let m = mask_logits(&[0.0, 0.0, 0.0], &[true, true, false]).unwrap();
        let p: Vec<f64> = log_softmax(&m).iter().map(|l| l.exp()).collect();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        assert!(matches!(mask_logits(&[1.0, 2.0], &[false, false]), Err(SqnError::EmptyMask)));
        assert_eq!(mask_logits(&[1.0, 1.0], &[true, true]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn categorical_examples() {
        let head = MaskedCategorical::new(&[0.0, 0.0], &[true, true]).unwrap();
        let (i, lp) = head.sample_with(0.25);
        assert_eq!(i, 0);
        assert!((lp + LN_2).abs() < 1e-15);
        let single = MaskedCategorical::new(&[3.0, -1.0, 7.0], &[false, true, false]).unwrap();
        for u in [0.0, 0.5, 0.99] {
            assert_eq!(single.sample_with(u), (1, 0.0));
        }
    }

    #[test]
    fn categorical_monte_carlo_matches_softmax() {
        let head = MaskedCategorical::new(&[0.3, -0.7, 1.1, 5.0], &[true, true, true, false]).unwrap();
        let p = head.probs();
        let mut rng = stream_rng(5, Stream::Policy);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[head.sample(&mut rng).0] += 1;
        }
        for k in 0..4 {
            let freq = counts[k] as f64 / n as f64;
            let se = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
            assert!((freq - p[k]).abs() <= 3.0 * se + 1e-12, "entry {k}: {freq} vs {}", p[k]);
        }
        assert_eq!(counts[3], 0);
    }

    #[test]
    fn categorical_grad_matches_finite_differences() {
        let logits = [0.3, -0.7, 1.1, 0.2];
        let mask = [true, false, true, true];
        let head = MaskedCategorical::new(&logits, &mask).unwrap();
        let (_, g) = head.log_prob_grad(2).unwrap();
        for j in 0..4 {
            let mut a = logits;
            let mut b = logits;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let num = (MaskedCategorical::new(&a, &mask).unwrap().log_prob(2) - MaskedCategorical::new(&b, &mask).unwrap().log_prob(2)) / 2e-6;
            assert!((num - g[j]).abs() < 1e-6, "{j}: {num} vs {}", g[j]);
        }
    }

    #[test]
    fn multinomial_zero_trials() {
        let h = LinkMultinomial::new(&[0.1, 0.2, 0.3], 0, &[true, true]).unwrap();
        let mut rng = stream_rng(1, Stream::Policy);
        assert_eq!(h.sample(&mut rng), vec![0, 0, 0]);
        assert_eq!(h.log_prob(&[0, 0, 0]).unwrap().0, 0.0);
    }

    #[test]
    fn multinomial_two_by_two() {
        let h = LinkMultinomial::new(&[0.0, 0.0], 2, &[true]).unwrap();
        let (lp, _) = h.log_prob(&[1, 1]).unwrap();
        assert!((lp - pmf_oracle(&[0.5, 0.5], &[1, 1]).ln()).abs() < 1e-12);
        assert!((lp + LN_2).abs() < 1e-12);
    }

    #[test]
    fn multinomial_certain_outcome() {
        let h = LinkMultinomial::new(&[0.0, 1.0, 1.0], 3, &[false, false]).unwrap();
        let (lp, g) = h.log_prob(&[3, 0, 0]).unwrap();
        assert!(lp.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn multinomial_masked_class_is_error() {
        let h = LinkMultinomial::new(&[0.0, 1.0, 1.0], 3, &[false, true]).unwrap();
        assert!(matches!(h.log_prob(&[1, 1, 1]), Err(SqnError::ImpossibleOutcome)));
    }

    #[test]
    fn multinomial_normalizes_by_enumeration() {
        let mut rng = stream_rng(9, Stream::Init);
        for k in 1..=3usize {
            for n in 0..=4u32 {
                let logits: Vec<f64> = (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect();
                let h = LinkMultinomial::new(&logits, n, &vec![true; k]).unwrap();
                let probs = h.probs();
                let mut total = 0.0;
                for row in compositions(n, k + 1) {
                    let lp = h.log_prob(&row).unwrap().0;
                    assert!((lp.exp() - pmf_oracle(&probs, &row)).abs() < 1e-9);
                    total += lp.exp();
                }
                assert!((total - 1.0).abs() < 1e-9, "k={k} n={n}: {total}");
            }
        }
    }

    #[test]
    fn multinomial_masked_class_never_sampled() {
        let h = LinkMultinomial::new(&[0.0, 5.0, 0.0], 4, &[false, true]).unwrap();
        let mut rng = stream_rng(2, Stream::Policy);
        for _ in 0..100_000 {
            let row = h.sample(&mut rng);
            assert_eq!(row[1], 0);
            assert_eq!(row.iter().sum::<u32>(), 4);
        }
    }

    #[test]
    fn masking_invariance() {
        let a = LinkMultinomial::new(&[0.2, -1.0, 0.4], 3, &[false, true]).unwrap();
        let b = LinkMultinomial::new(&[0.2, 40.0, 0.4], 3, &[false, true]).unwrap();
        assert_eq!(a.probs(), b.probs());
        assert_eq!(a.log_prob(&[1, 0, 2]).unwrap(), b.log_prob(&[1, 0, 2]).unwrap());
        let mut r1 = stream_rng(4, Stream::Policy);
        let mut r2 = stream_rng(4, Stream::Policy);
        for _ in 0..100 {
            assert_eq!(a.sample(&mut r1), b.sample(&mut r2));
        }
    }

    #[test]
    fn zero_actor_uniform_heads() {
        let sh = builtin("sh1").unwrap();
        let actor = Mlp::zeros(&[state_dim(&sh), 8, 8, actor_output_dim(&sh)]);
        let s = NetworkState { q: QueueMatrix::from_rows(2, 1, vec![1, 1]), y: vec![1, 1], t: 0 };
        let PolicyDist::Categorical(h) = actor_forward(&actor, &s, &sh, None).unwrap() else { panic!() };
        assert_eq!(h.probs(), vec![0.5, 0.5, 0.0]);

        let mh = builtin("mh1").unwrap();
        let reach = reachability_mask(&mh).unwrap();
        let actor = Mlp::zeros(&[state_dim(&mh), 8, 8, actor_output_dim(&mh)]);
        let s = NetworkState { q: QueueMatrix::zeros(4, 2), y: vec![1; 6], t: 0 };
        let PolicyDist::Multinomial(hs) = actor_forward(&actor, &s, &mh, Some(&reach)).unwrap() else { panic!() };
        for h in hs {
            for p in h.probs() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoding_is_symlog_of_q_then_y() {
        let s = NetworkState { q: QueueMatrix::from_rows(2, 1, vec![0, 0]), y: vec![1, 2], t: 0 };
        let e = encode_state(&s);
        let expected = [0.0, 0.0, 2f64.ln(), 3f64.ln()];
        assert_eq!(e.len(), 4);
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // q = (e - 1, 0) is not an integer state; check the transform directly.
        let direct = symlog(&[E - 1.0]);
        assert!((direct[0] - 1.0).abs() < 1e-15);
    }
}
