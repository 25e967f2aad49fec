//! Depth-wise flow-map distillation at desk scale.
//!
//! A multi-layer residual transformer teacher, trained as a one-step flow
//! map on synthetic mixtures, is compressed into a single shared-weight block
//! unrolled along a normalized depth coordinate. The compact student then
//! screens candidate noises so the teacher refines only the best one.

pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod scout;
pub mod student;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ElemType, Scalar, Tape, Tensor, Var};
