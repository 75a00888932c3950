//! Clone-search toolkit for compiled functions.
//!
//! The pipeline flattens disassembled functions into instruction text,
//! prunes noise tokens with a one-step policy-gradient agent, encodes the
//! survivors through a conditional variational information bottleneck whose
//! condition labels exist only at training time, and serves cosine-ranked
//! clone search plus out-of-domain evaluation.

pub mod config;
pub mod corpus;
pub mod cvib;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod removal;
pub mod rng;
pub mod search;
pub mod splits;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
