//! Self-supervised discovery of discrete vehicle actions.
//!
//! Trajectories are encoded into a continuous latent space whose prior is a
//! mixture of `K` diagonal Gaussians; each component, decoded back into
//! trajectory space, is one learned action. A scenario classifier predicts
//! action probabilities, and a scenario-conditioned dual encoder narrows each
//! action's latent distribution for a specific scenario.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gaussmath;
pub mod model;
pub mod neuralnet;
pub mod objectives;
pub mod pipeline;
pub mod synthdata;
pub mod training;

pub use error::{CheckpointError, Error, Result};
