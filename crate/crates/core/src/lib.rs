#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod edi;
pub mod error;
pub mod events;
pub mod gradsuite;
pub mod image;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};
pub use events::{EventStream, VoxelGrid};
pub use image::Image;
pub use metrics::MetricReport;
pub use network::{ModelConfig, TrainConfig, Weights};
pub use tensor::Tensor;
