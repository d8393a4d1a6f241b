//! Energy-guided multimodal coordination on a synthetic benchmark.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tape, [`nn`]
//! the parameter store and perceptrons, then one module per training
//! component ([`msd`], [`cce`], [`emc`], [`imtd`], [`fusion`]) and the
//! [`trainer`] that runs the two-stage schedule over [`synth`] data.

pub mod autodiff;
pub mod cce;
pub mod emc;
pub mod error;
pub mod fusion;
pub mod imtd;
pub mod metrics;
pub mod model;
pub mod msd;
pub mod nn;
pub mod presence;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use autodiff::{grad_check, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{EbmcModel, ModelDims, ModelSpec};
pub use presence::Presence;
pub use synth::{GeneratorSpec, MultimodalBatch, TaskMode};
pub use trainer::{Ablation, Dataset, Module, RunPlan, TrainConfig};
