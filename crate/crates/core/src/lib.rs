//! Tissue-aware cell classification from a local morphology embedding and a
//! surrounding-tissue context embedding, fused by a learned per-cell gate.

pub mod data;
pub mod error;
pub mod experts;
pub mod gate;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod projection;
pub mod seed;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use math::{Matrix, ProbVector};
