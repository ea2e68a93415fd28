//! Dynamic text-guided vision-token pruning for vision-language transformers.
//!
//! - [`linalg`]: dense kernel and the seeded generator.
//! - [`model`]: deterministic toy transformer exposing per-layer attention.
//! - [`prune`]: text prior, vision scoring, top-k retention, schedules.
//! - [`analytics`]: change points, shift histograms, key-token mIoU.
//! - [`cost`]: analytical FLOPs model.
//! - [`trace`] and [`config`]: on-disk formats.

pub mod analytics;
pub mod config;
pub mod cost;
pub mod error;
pub mod linalg;
pub mod model;
pub mod prune;
pub mod rank;
pub mod trace;

pub use analytics::{
    cumulative_curve, detect_change_point, key_text_tokens, miou_matrix, shift_histogram,
    top_vision_tokens, AttentionCurve, ChangePointResult, MiouMatrix, ShiftHistogram,
};
pub use config::{DataConfig, RunConfig};
pub use cost::{run_cost, CostParams, CostReport};
pub use error::{Error, Result};
pub use linalg::{column_sums, matvec_left, softmax_rows, Mask, Matrix, SeededRng, Vector};
pub use model::{
    extract_blocks, generate_sample, AttentionMaps, KeepAll, LayerAttention, Model, ModelConfig,
    PrefillHook, Sample, SampleSpec, TokenSequence,
};
pub use prune::{
    make_hook, score_vision, solve_schedule, text_prior, top_k_retain, BaselineKind, KeepPolicy,
    PruneHook, PruneSchedule, RetainedSet, Retention, Stage, TextPrior, VisionScores,
};
pub use trace::{read_trace, write_trace, TraceManifest};
