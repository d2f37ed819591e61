//! Minimal differentiable function approximator shared by actor and critic.

mod adam;
mod mlp;

pub use adam::Adam;
pub use mlp::{Activations, Dense, GradBundle, Mlp};

/// Hidden width used by actor and critic.
pub const HIDDEN: usize = 64;

/// Elementwise `sign(x) * ln(1 + |x|)`.
pub fn symlog(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.signum() * v.abs().ln_1p()).collect()
}
