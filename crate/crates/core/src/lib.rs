//! Frequency-domain feature pipeline for detecting machine-generated text
//! under domain shift.
//!
//! Document embeddings are treated as real signals along the hidden axis.
//! The pipeline transforms them to a one-sided spectrum, partitions the bins
//! into low/mid/high bands, optionally drops the low band, rescales mid/high
//! bands to corpus-level magnitudes, and aligns same-label spectra with a
//! margin loss while a linear head is trained with cross-entropy.

pub mod alignment;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod perturb;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
