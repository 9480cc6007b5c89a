//! Self-attentive end-to-end neural speaker diarization (SA-EEND) and its
//! residual auxiliary variant (RX-EEND), built on a small reverse-mode
//! differentiation engine.
//!
//! The crate covers the whole pipeline: feature extraction
//! ([`features`]), the encoder stack ([`model`]), permutation-invariant
//! training losses ([`losses`]), DER scoring and per-block probes
//! ([`metrics`]), a synthetic two-speaker dialogue generator
//! ([`simulator`]) and the optimization loop ([`trainer`]).

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod io;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod simulator;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
