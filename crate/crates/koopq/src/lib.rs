//! Quality estimation for multistage manufacturing lines.
//!
//! A production run passes through a chain of stages; each stage has its own
//! process variables and its own quality measurements, and upstream physics
//! carries over into downstream outcomes. This crate models that carry-over
//! explicitly: a variational encoder per stage lifts the process variables
//! into a shared latent space, a (diagonal) Koopman operator propagates the
//! latent state from one stage to the next, and a small prediction head maps
//! the propagated latent onto the stage's quality indicators. The stochastic
//! variant propagates a full Gaussian belief (mean and log-deviation pair)
//! instead of a point latent.
//!
//! Module map:
//! - [`numcore`]: dense f64 tensors on a reverse-mode autodiff tape, Adam,
//!   and a finite-difference gradient oracle.
//! - [`nn`]: dense layers, MLPs, encoder/decoder builders, the Gaussian head,
//!   and the auxiliary eigenvalue networks.
//! - [`koopman`]: Koopman transition operators and latent propagation, both
//!   deterministic and Gaussian.
//! - [`model`]: stage modules assembled into a multistage model, the forward
//!   pass, and the training losses.
//! - [`data`]: CSV loading against a declarative schema, label cleaning,
//!   standardization, splitting, and synthetic process generation.
//! - [`train`]: the two-step training pipeline (per-stage pretraining, then
//!   joint fine-tuning), evaluation, and multi-seed experiments.
//! - [`analysis`]: input sensitivity, Koopman spectrum export, latent-size
//!   sweeps, and error binned by product magnitude.
//!
//! With the default `parallel` feature the matrix kernels and the multi-seed
//! experiment fan-out use rayon; results are bit-identical to the sequential
//! fallback because every output element keeps a fixed summation order.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod koopman;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod train;
