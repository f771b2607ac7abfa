//! Entropy-regularized diffusion policies over a mean-reverting SDE, with
//! Q-ensemble critics, for offline reinforcement learning at desk scale.

pub mod critic;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod io;
pub mod nn;
pub mod policy;
pub mod sde;
pub mod trainer;
pub mod wasserstein;

pub use error::{Error, Result};
