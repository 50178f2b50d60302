//! Push-Pull gradient tracking for distributed bilevel optimization over
//! time-varying directed graphs.
//!
//! Layers, bottom up: [`digraph`] topologies, [`mixing`] matrices and weight
//! recursions, [`problems`] with their oracles, [`algorithms`] as pure
//! one-step maps, [`diagnostics`], and the config-driven [`harness`].

pub mod algorithms;
pub mod diagnostics;
pub mod digraph;
pub mod error;
pub mod harness;
pub mod mixing;
pub mod problems;
pub mod seed;
pub mod selftest;
pub mod stack;

pub use error::{FabError, Result};
