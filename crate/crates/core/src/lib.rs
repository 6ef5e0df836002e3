//! Temporal shift-and-align building blocks for video inpainting.
//!
//! Neighbouring-frame feature bands are shifted in time (as in a temporal
//! shift module), warped into the current frame with optical flow, and fused
//! with the current features under a cycle-consistency validity mask.
//! The crate also carries the pieces needed to train and evaluate such a
//! network at desk scale: a small autodiff engine, a generator and
//! discriminator, the loss stack, quality metrics and a synthetic data
//! pipeline with exact flows.

pub mod error;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod trainer;
pub mod tsam;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, Var};
