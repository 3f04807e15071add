//! Adversarially trained diffusion models on synthetic data with known
//! structure: training, sampling, trajectory attacks and exact metrics.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{DataTransform, TrainedModel};
pub use schedule::{NoiseSchedule, RaySchedule};
pub use tensor::Tensor;
