use serde::{Deserialize, Serialize};

use super::rollout::Trajectory;
use crate::env::NetworkConfig;
use crate::error::{Result, SqnError};
use crate::heads::{encode_state, PolicyDist};
use crate::nn::{GradBundle, Mlp};

/// Mean shaped cost of a trajectory.
pub fn estimate_eta(shaped_costs: &[f64]) -> Result<f64> {
    if shaped_costs.is_empty() {
        return Err(SqnError::EmptyTrajectory);
    }
    Ok(shaped_costs.iter().sum::<f64>() / shaped_costs.len() as f64)
}

/// Average-cost GAE. `values` holds `V(s_0) .. V(s_T)`; returns advantages
/// and value targets `A_t + V(s_t)`.
pub fn gae_advantages(shaped_costs: &[f64], values: &[f64], lambda: f64, eta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SqnError::InvalidParameter(format!("lambda must be in [0,1], got {lambda}")));
    }
    let t = shaped_costs.len();
    if values.len() != t + 1 {
        return Err(SqnError::Dimension { expected: t + 1, got: values.len() });
    }
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let delta = shaped_costs[i] - eta + values[i + 1] - values[i];
        acc = delta + lambda * acc;
        adv[i] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Zero mean, unit variance over the non-intervened entries. Left centered
/// only when the spread is negligible.
pub fn normalize_advantages(adv: &mut [f64], intervened: &[bool]) {
    let live: Vec<f64> = adv.iter().zip(intervened).filter(|(_, i)| !**i).map(|(a, _)| *a).collect();
    if live.is_empty() {
        return;
    }
    let n = live.len() as f64;
    let mean = live.iter().sum::<f64>() / n;
    let var = live.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) * scale;
    }
}

/// How the PPO surrogate bounds the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipForm {
    /// `max(A R, clip(R, 1-eps, 1+eps) A)`.
    Standard,
    /// `max(A R, g(eps, A))` with `g = (1+eps) A` for `A >= 0`, `(1-eps) A`
    /// otherwise. Constant in `R` near 1.
    Literal,
}

/// Per-sample surrogate value and its derivative with respect to the ratio.
pub fn ppo_term(adv: f64, ratio: f64, eps: f64, form: ClipForm) -> (f64, f64) {
    let unclipped = adv * ratio;
    let clipped = match form {
        ClipForm::Standard => ratio.clamp(1.0 - eps, 1.0 + eps) * adv,
        ClipForm::Literal => {
            if adv >= 0.0 {
                (1.0 + eps) * adv
            } else {
                (1.0 - eps) * adv
            }
        }
    };
    if unclipped >= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyObjective {
    /// `(1/T) Σ (1 - I) A log π`.
    Pg,
    /// `(1/T) Σ (1 - I) max(A R, clip)`.
    Ppo { clip: f64, form: ClipForm },
}

/// Policy loss over `batch` (indices into `traj`) and its gradient with
/// respect to the actor parameters. Intervened steps contribute nothing.
pub fn policy_loss(
    actor: &Mlp,
    objective: PolicyObjective,
    traj: &Trajectory,
    batch: &[usize],
    advantages: &[f64],
    config: &NetworkConfig,
    reach: Option<&[Vec<bool>]>,
) -> Result<(f64, GradBundle)> {
    if let PolicyObjective::Ppo { clip, .. } = objective {
        if !(clip > 0.0 && clip < 1.0) {
            return Err(SqnError::InvalidParameter(format!("clip must be in (0,1), got {clip}")));
        }
    }
    let mut grads = GradBundle::zeros_like(actor);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let step = &traj.steps[i];
        if step.intervened {
            continue;
        }
        let acts = actor.forward_cached(&encode_state(&step.state))?;
        let dist = PolicyDist::from_logits(acts.output(), &step.state, config, reach)?;
        let (lp, dlp) = dist.log_prob_grad(&step.action)?;
        let adv = advantages[i];
        let (term, dterm_dlp) = match objective {
            PolicyObjective::Pg => (adv * lp, adv),
            PolicyObjective::Ppo { clip, form } => {
                let old = step.log_prob.ok_or_else(|| SqnError::InvalidAction("missing behavior log-probability".into()))?;
                let ratio = (lp - old).exp();
                if !ratio.is_finite() {
                    return Err(SqnError::NonFinite("probability ratio".into()));
                }
                let (term, dr) = ppo_term(adv, ratio, clip, form);
                (term, dr * ratio)
            }
        };
        loss += scale * term;
        if dterm_dlp != 0.0 {
            let out_grad: Vec<f64> = dlp.iter().map(|g| scale * dterm_dlp * g).collect();
            actor.backward_into(&acts, &out_grad, &mut grads)?;
        }
    }
    Ok((loss, grads))
}

pub fn ia_pg_loss(
    actor: &Mlp,
    traj: &Trajectory,
    batch: &[usize],
    advantages: &[f64],
    config: &NetworkConfig,
    reach: Option<&[Vec<bool>]>,
) -> Result<(f64, GradBundle)> {
    policy_loss(actor, PolicyObjective::Pg, traj, batch, advantages, config, reach)
}

pub fn ia_ppo_loss(
    actor: &Mlp,
    traj: &Trajectory,
    batch: &[usize],
    advantages: &[f64],
    clip: f64,
    config: &NetworkConfig,
    reach: Option<&[Vec<bool>]>,
) -> Result<(f64, GradBundle)> {
    policy_loss(actor, PolicyObjective::Ppo { clip, form: ClipForm::Standard }, traj, batch, advantages, config, reach)
}

/// `(1/T) Σ ½ (V(s) - V̂ + nu b)²` over `batch`, with gradient.
pub fn critic_loss(
    critic: &Mlp,
    encodings: &[Vec<f64>],
    batch: &[usize],
    targets: &[f64],
    nu: f64,
    bias: f64,
) -> Result<(f64, GradBundle)> {
    let mut grads = GradBundle::zeros_like(critic);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let acts = critic.forward_cached(&encodings[i])?;
        let err = acts.output()[0] - targets[i] + nu * bias;
        loss += scale * 0.5 * err * err;
        critic.backward_into(&acts, &[scale * err], &mut grads)?;
    }
    Ok((loss, grads))
}
