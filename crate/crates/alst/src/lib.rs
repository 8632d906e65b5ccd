//! ALS longitudinal speech transformer: cohort handling, the model, its
//! training recipe, the evaluation metrics and the ablation harnesses.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
