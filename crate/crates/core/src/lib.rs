//! Weight-level adapters (LoRA, CeRA, parallel module adapters) on a small frozen
//! transformer, trained with a tape autodiff engine and inspected through their
//! singular spectra.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`nn`]: dense f64 tensors, reverse-mode autodiff and
//!   the differentiable primitives built on it.
//! - [`spectral`]: Jacobi SVD, effective rank and cumulative-energy metrics.
//! - [`adapters`]: adapter configs, initialisation, forward passes, merging and
//!   parameter accounting.
//! - [`model`]: the frozen decoder backbone and adapter injection.
//! - [`tasks`]: the logistic-map sequence task, the nonlinear-teacher regression task
//!   and its least-squares linear floor.
//! - [`train`]: AdamW with a cosine schedule, evaluation and throughput timing.
//! - [`experiment`]: configs, grids of runs and their persisted outputs.

pub mod adapters;
pub mod autograd;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod spectral;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use adapters::{Adapter, AdapterConfig, AdapterKind, AdapterState, MatrixGeometry, Target};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ResultRecord, RunRecord, RunSpec, SpectralSource};
pub use model::{Batch, FrozenBackbone, LatentSource, Model, ModelConfig, ModelMode, Site};
pub use nn::{Activation, Mode};
pub use rng::RngState;
pub use spectral::SpectralReport;
pub use tensor::Tensor;
pub use train::{Metric, TrainConfig, TrainReport};
