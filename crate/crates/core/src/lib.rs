//! Mixed-precision information bottleneck for trait/state disentanglement.
//!
//! A shared encoder feeds a float trait head (speaker identity) and a
//! low-bit quantized state head (agitation). Precision bounds how much
//! information the state embedding can carry.

pub mod adapt;
pub mod error;
pub mod eval;
pub mod features;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod privacy;
pub mod quant;
pub mod synth;

pub use error::{Error, Result};
