//! Concept-bottleneck sequence models for interpretable driving-command
//! prediction.
//!
//! Frames are mapped to cosine similarities against a vocabulary of
//! natural-language driving scenarios, fused with sensor history, and encoded
//! by a sliding-window transformer with a global `[CLS]` token whose final
//! state feeds small regression heads for steering angle and lead distance.

mod binio;
pub mod concepts;
pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use concepts::{ConceptScoreMatrix, ConceptSet, SourceTag};
pub use data::{DatasetManifest, DriveSequence, Profile};
pub use error::{Error, ErrorKind, Result};
pub use explain::ExplanationReport;
pub use model::{AttentionTrace, ModelConfig, ModelParams, Task};
pub use numerics::Tensor;
pub use training::{EvalReport, TrainConfig};
