//! A desk-scale laboratory for studying how generalized label smoothing
//! changes the vulnerability of small classifiers to model inversion attacks.
//!
//! The crate trains small feedforward networks under a configurable smoothing
//! factor (including negative values), runs gradient-based inversion attacks
//! against the frozen models, and evaluates the reconstructions with an
//! independent evaluation model, feature distances, knowledge-extraction
//! scores, calibration, and adversarial robustness probes.

pub mod classifier;
pub mod data;
pub mod error;
pub mod inversion;
pub mod linalg;
pub mod metrics;
pub mod smoothing;

pub use error::{Error, Result};
