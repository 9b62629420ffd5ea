//! Concept erasure and adversarially robust erasure for small conditional
//! diffusion models.
//!
//! The crate trains a conditional DDPM on synthetic Gaussian-cluster
//! concepts, erases one concept by fine-tuning against a negatively guided
//! frozen copy, attacks the erased model by perturbing the concept's
//! condition vector at a single timestep, and hardens the erasure by
//! training against those attacks.
//!
//! Modules, bottom-up:
//! - [`model`]: the MLP denoiser with hand-written gradients and Adam.
//! - [`diffusion`]: noise schedule, guidance, ancestral sampling.
//! - [`data`]: concept datasets and the oracle judge.
//! - [`erasure`]: base training and plain erasure.
//! - [`race`]: PGD on condition vectors and adversarial erasure.
//! - [`eval`]: diffusion classifier, attack success rate, sweeps, quality.
//! - [`checkpoint`], [`config`], [`report`], [`pipeline`]: persistence and
//!   orchestration used by the `race-lab` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod erasure;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod race;
pub mod report;
pub mod rng;

pub use error::{LabError, Result};
