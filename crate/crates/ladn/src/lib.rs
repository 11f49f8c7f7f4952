//! Local adversarial disentangling network for facial makeup transfer and
//! removal, desk-scale, CPU-only, dependency-light.
//!
//! The crate is a vertical slice: a tape-based autodiff core
//! ([`autodiff`]), landmark geometry with warping and frontalization
//! ([`geometry`]), a deterministic synthetic face corpus ([`synthface`]),
//! the encoder/generator/discriminator networks ([`nets`]), the loss
//! catalogue ([`losses`]), the two-phase training loop ([`training`]), and
//! a command-line front end ([`cli`]).

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synthface;
pub mod training;

pub use error::{Error, Result};
