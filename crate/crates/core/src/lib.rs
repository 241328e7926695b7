//! Multimodal self-attention fusion with hybrid classification + margin
//! ranking training, on top of a small reverse-mode autodiff engine.
//!
//! Layers: [`tensor`] (autodiff) → [`nn`] (layers) → [`model`] (fusion network
//! and answer scoring) → [`loss`] / [`metrics`] → [`train`] (Adam, early
//! stopping) → [`experiments`] (ablation and gradient-check harnesses).
//! [`data`] provides feature-file IO and the synthetic cross-modal task.

pub mod error;
pub mod finite_diff;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{Rng, SeedPlan};
pub use tensor::Tensor;

pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod experiments;

pub use data::{Dataset, DatasetMeta, Sample, SyntheticSpec};
pub use experiments::{AblationReport, AblationVariant, GradcheckReport};
pub use loss::{HybridConfig, LossBreakdown, RankingConfig};
pub use metrics::EvalReport;
pub use model::{FusionMode, ModelConfig, Pooling, RankVqaModel};
pub use train::{fit, EpochLog, TrainConfig};
