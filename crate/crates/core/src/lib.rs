//! Stochastic queueing network simulation and intervention-assisted
//! actor-critic training.
//!
//! A learned actor controls the network while the total backlog stays below
//! a threshold; above it a classical stabilizing policy (MaxWeight for
//! single-hop, Backpressure for multi-hop) takes over. The threshold comes
//! from Lyapunov drift statistics gathered under the stabilizing policy.

pub mod baselines;
pub mod drift;
pub mod env;
pub mod error;
pub mod harness;
pub mod heads;
pub mod nn;
pub mod rng;
pub mod train;

pub use baselines::BaselinePolicy;
pub use drift::{InterventionGate, ThresholdRule};
pub use env::{Action, Environment, NetworkConfig, NetworkKind, NetworkState};
pub use error::{Result, SqnError};
pub use heads::PolicyDist;
pub use nn::{Adam, Mlp};
