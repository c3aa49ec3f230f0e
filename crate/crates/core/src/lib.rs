//! Desk-scale diffusion-based image segmentation laboratory.
//!
//! Everything runs on CPU over small synthetic 2D tasks: a tape-based
//! autodiff tensor engine, DDPM/DDIM noise schedules and samplers, a tiny
//! time-conditioned U-net, five training strategies (standard diffusion,
//! two self-conditioning variants, two recycling variants), segmentation
//! metrics, and a CLI experiment harness.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
