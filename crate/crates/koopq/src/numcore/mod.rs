//! Numeric core: dense f64 tensors on a reverse-mode autodiff tape.
//!
//! Everything upstream (layers, Koopman propagation, losses) is built from
//! the primitives in [`tape`]; [`adam`] owns the optimizer, [`params`] the
//! persistent parameter store that outlives individual tapes, and
//! [`gradcheck`] the central-difference oracle used by the test suite to
//! certify every backward rule.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;

pub use adam::{clip_global_norm, global_grad_norm, Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, TensorId};
