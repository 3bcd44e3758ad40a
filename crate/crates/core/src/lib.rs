//! Weakly-supervised temporal action localization (WTAL) with cross-distribution
//! scale adaptation.
//!
//! The crate covers the full chain on snippet-level feature sequences:
//!
//! * [`data`] — dataset model, on-disk formats, and a seeded synthetic generator
//!   that produces two distributions differing in action duration scale and a
//!   constant visual offset.
//! * [`model`] — the two-branch base model (class-agnostic attention + class
//!   activation sequence), its MIL top-k classification loss, analytic
//!   gradients, and the stage-1 training loop.
//! * [`adapter`] — stage-2 teacher-student adaptation: salience sampling,
//!   attention refinement, alignment losses, and EMA teacher updates.
//! * [`localizer`] — inference: video-level scoring, multi-threshold proposal
//!   generation from the attention sequence, and soft-NMS.
//! * [`evaluator`] — temporal IoU, interpolated AP/mAP, snippet-level
//!   diagnostics, and the error-category breakdown.
//!
//! All randomness is drawn from named substreams of a single experiment seed
//! ([`rng::stage_rng`]), so every stage is independently reproducible.

pub mod adapter;
pub mod data;
pub mod evaluator;
pub mod localizer;
pub mod model;
pub mod rng;

pub use adapter::{AdaptConfig, AdaptResult, CalibrationTarget, RefineConfig, TeacherStudent};
pub use data::{Dataset, FeatureSequence, GroundTruthInstance, Split, SynthConfig, VideoRecord};
pub use evaluator::{
    DiagnosticsReport, ErrorBreakdown, EvalReport, GroundTruthRecord, PredictionRecord,
};
pub use localizer::{InferenceConfig, Proposal};
pub use model::{ForwardOutput, ModelParams, TrainConfig};
