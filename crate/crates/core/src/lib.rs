//! Zero-shot estimation of drift and diffusion functions for low-dimensional
//! stochastic differential equations.
//!
//! The crate is organised bottom-up:
//!
//! * [`sde`]: polynomial SDE systems, Euler–Maruyama simulation and the
//!   short-time Gaussian transition density.
//! * [`datagen`]: the synthetic prior over polynomial SDEs, rejection of
//!   unstable systems and the observation corruption schemes.
//! * [`obs`] and [`normalize`]: transition tuples and the instance
//!   normalization that makes the recognition model scale-agnostic.
//! * [`autograd`] and [`model`]: a small reverse-mode tape and the
//!   transformer recognition network built on top of it.
//! * [`training`]: the uncertainty-weighted pretraining objective, AdamW and
//!   the two finetuning objectives.
//! * [`eval`]: canonical systems, signature-kernel MMD and grid MSE.

pub mod autograd;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod normalize;
pub mod obs;
pub mod rng;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, VectorFieldEstimate};
pub use normalize::NormalizationRecord;
pub use obs::ObservationSet;
pub use rng::SeedTree;
pub use sde::{MultiIndex, Path, PathBundle, Polynomial, SdeSystem, SimulationGrid, VectorField};
