use rand::Rng;

use crate::baselines::BaselinePolicy;
use crate::drift::InterventionGate;
use crate::env::{Action, Environment, NetworkState};
use crate::error::{Result, SqnError};
use crate::heads::{actor_forward, encode_state};
use crate::nn::Mlp;

/// One slot of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: NetworkState,
    pub intervened: bool,
    pub action: Action,
    /// Behavior log-probability; `None` on intervened steps.
    pub log_prob: Option<f64>,
    /// Pre-step backlog.
    pub cost: u64,
    pub shaped_cost: f64,
}

/// A contiguous stretch of slots; the environment is never reset between
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// State after the last step, the start of the next trajectory.
    pub final_state: NetworkState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Fraction of steps where the stabilizing policy acted.
    pub fn intervention_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.intervened).count() as f64 / self.steps.len() as f64
    }

    pub fn shaped_costs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.shaped_cost).collect()
    }

    /// Encodings of `s_0 .. s_T`, the final state included.
    pub fn encodings(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| &s.state).chain(std::iter::once(&self.final_state)).map(encode_state).collect()
    }
}

/// Run `steps` slots under the intervention-assisted policy: `fallback`
/// whenever the gate fires, otherwise a sample from `actor`.
pub fn rollout<R: Rng + ?Sized>(
    env: &mut Environment,
    actor: &Mlp,
    fallback: BaselinePolicy,
    gate: &InterventionGate,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let state = env.state().clone();
        let intervened = gate.intervene(state.backlog());
        let (action, log_prob) = if intervened {
            (fallback.act(&state, env.config(), env.reachability(), rng), None)
        } else {
            let dist = actor_forward(actor, &state, env.config(), env.reachability())?;
            let (a, lp) = dist.sample(rng)?;
            if !lp.is_finite() {
                return Err(SqnError::NonFinite("behavior log-probability".into()));
            }
            (a, Some(lp))
        };
        let outcome = env.step(&action)?;
        out.push(Transition { state, intervened, action, log_prob, cost: outcome.cost, shaped_cost: outcome.shaped_cost });
    }
    Ok(Trajectory { steps: out, final_state: env.state().clone() })
}
