//! Intervention-assisted actor-critic training: rollouts under the gated
//! policy, average-cost advantages, policy and critic updates.

mod losses;
mod rollout;

pub use losses::{
    critic_loss, estimate_eta, gae_advantages, ia_pg_loss, ia_ppo_loss, normalize_advantages, policy_loss, ppo_term, ClipForm,
    PolicyObjective,
};
pub use rollout::{rollout, Trajectory, Transition};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::env::{NetworkConfig, NetworkKind};
use crate::error::{Result, SqnError};
use crate::heads::{actor_output_dim, state_dim};
use crate::nn::{Adam, Mlp, HIDDEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    IaPg,
    IaPpo,
    /// PPO with the gate disabled.
    AcPpo,
}

impl Algorithm {
    pub fn uses_gate(self) -> bool {
        !matches!(self, Self::AcPpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::IaPg => "ia-pg",
            Self::IaPpo => "ia-ppo",
            Self::AcPpo => "ac-ppo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = SqnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ia-pg" => Ok(Self::IaPg),
            "ia-ppo" => Ok(Self::IaPpo),
            "ac-ppo" => Ok(Self::AcPpo),
            _ => Err(SqnError::InvalidParameter(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Rollout length per episode.
    pub episode_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub clip_form: ClipForm,
    pub lambda: f64,
    pub lr: f64,
    /// Average-value constraint coefficient.
    pub nu: f64,
    /// EMA step for the critic bias accumulator.
    pub bias_step: f64,
    pub normalize_advantages: bool,
}

impl TrainConfig {
    /// Defaults for a network kind: 2048-step episodes single-hop, 512 multi-hop.
    pub fn for_kind(kind: NetworkKind, algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            episode_len: match kind {
                NetworkKind::SingleHop => 2048,
                NetworkKind::MultiHop => 512,
            },
            epochs: 5,
            minibatches: 8,
            clip: 0.2,
            clip_form: ClipForm::Standard,
            lambda: 0.95,
            lr: 3e-4,
            nu: 0.1,
            bias_step: 0.2,
            normalize_advantages: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SqnError::InvalidParameter(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must be in (0,1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0,1], got {}", self.lambda));
        }
        if self.episode_len == 0 || self.minibatches == 0 {
            return bad("episode length and minibatch count must be positive".into());
        }
        if self.nu < 0.0 || !(self.lr > 0.0) {
            return bad(format!("need nu >= 0 and lr > 0, got {}, {}", self.nu, self.lr));
        }
        Ok(())
    }

    pub fn objective(&self) -> PolicyObjective {
        match self.algorithm {
            Algorithm::IaPg => PolicyObjective::Pg,
            Algorithm::IaPpo | Algorithm::AcPpo => PolicyObjective::Ppo { clip: self.clip, form: self.clip_form },
        }
    }
}

/// Actor, critic, their optimizers and the critic bias accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub bias: f64,
}

/// Diagnostics from one update phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub eta_hat: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
}

impl ActorCritic {
    /// Orthogonal init: small final actor layer so the initial policy is
    /// close to uniform over valid actions.
    pub fn new<R: Rng + ?Sized>(config: &NetworkConfig, lr: f64, rng: &mut R) -> Self {
        let input = state_dim(config);
        let actor = Mlp::new(&[input, HIDDEN, HIDDEN, actor_output_dim(config)], 0.01, rng);
        let critic = Mlp::new(&[input, HIDDEN, HIDDEN, 1], 1.0, rng);
        let actor_opt = Adam::new(&actor, lr);
        let critic_opt = Adam::new(&critic, lr);
        Self { actor, critic, actor_opt, critic_opt, bias: 0.0 }
    }

    pub fn values(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>> {
        encodings.iter().map(|e| self.critic.forward(e).map(|v| v[0])).collect()
    }

    /// Advantages from the pre-update critic, then `epochs` passes of
    /// shuffled minibatch steps on actor and critic.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        traj: &Trajectory,
        cfg: &TrainConfig,
        config: &NetworkConfig,
        reach: Option<&[Vec<bool>]>,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        cfg.validate()?;
        if traj.is_empty() {
            return Err(SqnError::EmptyTrajectory);
        }
        let encodings = traj.encodings();
        let values = self.values(&encodings)?;
        let costs = traj.shaped_costs();
        let eta_hat = estimate_eta(&costs)?;
        let (mut adv, targets) = gae_advantages(&costs, &values, cfg.lambda, eta_hat)?;
        if cfg.normalize_advantages {
            let flags: Vec<bool> = traj.steps.iter().map(|s| s.intervened).collect();
            normalize_advantages(&mut adv, &flags);
        }
        let t = traj.len();
        let state_encodings = &encodings[..t];
        let objective = cfg.objective();
        let chunk = t.div_ceil(cfg.minibatches);
        let mut order: Vec<usize> = (0..t).collect();
        let mut stats = UpdateStats { eta_hat, policy_loss: 0.0, critic_loss: 0.0 };
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let (mut pl, mut cl) = (0.0, 0.0);
            for batch in order.chunks(chunk) {
                if batch.iter().any(|i| !traj.steps[*i].intervened) {
                    let (l, g) = policy_loss(&self.actor, objective, traj, batch, &adv, config, reach)?;
                    self.actor_opt.step(&mut self.actor, &g)?;
                    pl += l;
                }
                let (l, g) = critic_loss(&self.critic, state_encodings, batch, &targets, cfg.nu, self.bias)?;
                self.critic_opt.step(&mut self.critic, &g)?;
                cl += l;
            }
            let n = order.chunks(chunk).len() as f64;
            stats.policy_loss = pl / n;
            stats.critic_loss = cl / n;
            let mean_v = self.values(state_encodings)?.iter().sum::<f64>() / t as f64;
            self.bias = (1.0 - cfg.bias_step) * self.bias + cfg.bias_step * mean_v;
        }
        if !self.bias.is_finite() {
            return Err(SqnError::NonFinite("critic bias".into()));
        }
        Ok(stats)
    }
}
