//! Spectral hallucination scoring for language-model generations.

pub mod bound_lab;
pub mod bundle;
pub mod clipping;
pub mod config;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod seed;
pub mod spectral;
pub mod tiny_lm;

pub use bundle::{read_bundle, validate_bundle, write_bundle, Generation, TrajectoryBundle};
pub use detectors::{Detector, DetectorConfig, DetectorScores, Orientation};
pub use error::{Error, Result};
pub use spectral::{AmpMode, AmplificationEstimate, CalibrationStats, Components, SpectralConfig};
