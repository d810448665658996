//! Video-text fusion for pedestrian attribute recognition, from autodiff
//! tensors up to training and evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;
pub mod vision;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Gradients, OpKind, ParamId, ParamStore, Parameter, Scalar, Tape, Tensor, Var};
pub use text::{AttributeSchema, GroupKind, PromptTemplate};
pub use vision::{Frame, VitConfig};
pub use fusion::FusionConfig;
pub use model::{ModelConfig, VtfModel};
pub use config::RunConfig;
pub use data::{Dataset, SyntheticSpec, Tracklet};
pub use metrics::MetricReport;
pub use train::{TrainConfig, TrainLog};
