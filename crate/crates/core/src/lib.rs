//! Multi-task self-supervised monocular depth training with self-distillation
//! and per-pixel uncertainty weighting, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`diff`]: reverse-mode differentiation engine with a finite-difference checker
//! * [`geometry`]: pinhole cameras, rigid transforms and differentiable view synthesis
//! * [`losses`]: photometric, smoothness, distillation and uncertainty-weighted objectives
//! * [`networks`]: depth, pose and photometric-uncertainty networks plus checkpoints
//! * [`synth`]: procedural scenes with analytic ground truth and the on-disk dataset format
//! * [`train`]: Adam, learning-rate schedule and the teacher / student training loops
//! * [`eval`]: depth metrics, hardest-subset selection and map export

pub mod diff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
