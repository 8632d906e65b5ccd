//! The longitudinal speech transformer.

pub mod config;
pub mod forward;
pub mod params;
pub mod position;
pub mod sequence;

pub use config::{AlstConfig, PoolingMode, PositionMode};
pub use forward::{alst_loss, argmax, forward, round_score, position_embeddings, predict, predict_class, Branch, ForwardPass, LossParts, ModelOutput};
pub use params::{parameter_count_formula, AlstParams, Layout};
pub use position::{date_ranks, sinusoid, PositionDiagnostics};
pub use sequence::{build_patient_sequence, pad_batch, pool_segments, PaddedBatch, PatientSequence};
