//! BAFNet: a bilateral segmentation network for remote-sensing imagery.
//!
//! A large-kernel-attention encoder (the dependency path) runs alongside a
//! constant 1/8-resolution path of local/remote attention blocks; the two
//! exchange features twice and are fused by a channel-gated aggregation
//! module before a light segmentation head.

pub mod complexity;
pub mod config;
pub mod data;
pub mod dependency;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod remote_local;
pub mod runtime;
pub mod train;

pub use config::{Ablation, Backbone, Config, Fusion, ModelConfig, TrainConfig};
pub use error::{BafnetError, Result};
pub use model::{Bafnet, FeatureBundle};
pub use params::{Ctx, ParamStore};
