//! Tensors with reverse-mode autodiff, a small CNN toolkit and the
//! split-and-share classifier head, plus training and analysis utilities.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use data::{Augment, Batch, Dataset, Normalization, Split};
pub use error::{Error, Result};
pub use metrics::{evaluate, predict, MetricsReport, Predictions};
pub use model::{BackboneSpec, HeadSpec, Model, ModelSpec};
pub use nn::Mode;
pub use param::{ParamId, ParamKind, ParamStore};
pub use scalar::{Precision, Scalar};
pub use ssm::{LossScheme, SsmConfig, SsmHead, SsmOutput};
pub use tensor::Tensor;
pub use training::{fit, fit_with, lr_at, sgd_step, ssm_loss, EpochRecord, SgdState, TrainConfig, Trainer};
