//! Point-proposal cell detection.
//!
//! A convolutional backbone and top-down pyramid neck produce multi-level
//! feature maps. A grid of point proposals is moved by a learned
//! deformation, features are bilinearly sampled at every level for each
//! moved proposal, and two MLP heads decode a refinement offset and class
//! logits. Training assigns ground-truth cells to proposals one-to-one with
//! the Hungarian algorithm. An optional multi-field-of-view path fuses
//! features from concentric lower-magnification images.

pub mod assignment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use assignment::{Assignment, CostMatrix, LossBreakdown, LossConfig};
pub use data::{Cell, Sample, SynthSpec};
pub use error::{Error, Result};
pub use geometry::{CropLimits, Point, ProposalSet, PyramidLevel};
pub use metrics::{Detection, EvalConfig, EvalReport};
pub use model::{Model, ModelConfig, ModelInput, ModelOutput, RefineMode};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainOutcome};
