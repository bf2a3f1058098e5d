//! Chronic-disease prediction from patient visit timelines and clinical text.
//!
//! A bag-of-words text encoder and a transformer over visit durations and gaps each
//! produce an embedding; a feed-forward head fuses them into per-label probabilities.
//! Training mixes binary cross-entropy with a pairwise ranking hinge.

pub mod checkpoint;
pub mod config;
pub mod ehr;
pub mod error;
pub mod exec;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod train;
pub mod tst;

pub use error::{Error, Result};
pub use exec::ExecMode;
