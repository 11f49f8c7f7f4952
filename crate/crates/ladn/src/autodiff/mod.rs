//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Tensors are dense row-major buffers owned by the tape; ops append nodes
//! and records, `Tape::backward` replays the records in reverse exactly
//! once per call. The element type is generic: `f32` is the production
//! path, `f64` instantiates the identical code for finite-difference
//! verification.

pub mod fd;
pub(crate) mod kernels;
mod real;
mod tape;
mod tensor;

pub use fd::{central_diff, probe_indices, FdReport, FdTolerance};
pub use real::Real;
pub use tape::{SnState, Tape};
pub use tensor::{Tensor, TensorRef};
