//! Ablation and interpretation harnesses built on the trained model.

mod baseline;
mod confusion;
mod phoneme;
mod sweep;

pub use baseline::{linear_baseline, utterance_mean, BaselineConfig, LinearBaseline};
pub use confusion::{confusion_csv, emit_confusion, read_confusion, Confusion};
pub use phoneme::{
    phoneme_bucket, phoneme_importance, PhonemeImportanceResult, PhonemeScore, SegmentPolicy, MERGED_PHONEMES,
};
pub use sweep::{run_sweep, AxisValue, CellResult, SummaryRow, SweepAxis, SweepResult, SweepSpec};
