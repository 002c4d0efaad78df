//! Privileged-trimap distillation for image matting.
//!
//! A trimap-conditioned teacher is pretrained on synthetic composites and
//! then distilled into a trimap-free student through cross-layer semantic
//! distillation (global-context features) and attention-guided local
//! distillation (transition-region features and attention maps). The crate
//! carries its own small reverse-mode autodiff engine over 4-D `f64`
//! tensors.

pub mod alpha_loss;
pub mod checks;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use alpha_loss::{alpha_loss, AlphaLossConfig};
pub use data::{Attribute, CompositeSample, Dataset, Generator, Region, Trimap};
pub use distill::{DistillConfig, LocalMode, SemanticMode};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use metrics::{evaluate, report, Metrics, MetricsReport};
pub use nets::{FeatureTaps, Role, StudentNet, TeacherNet};
pub use params::{BindMode, Bound, ParamSpec, ParamStore};
pub use tensor::{Shape, Tensor};
pub use train::{lr_at, sgd_step, OptState, TrainConfig, TrainOutcome};
