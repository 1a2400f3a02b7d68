//! Electromagnetic tracking error compensation toolkit.
//!
//! Synthetic phantom data, a displacement-trained compensation network with
//! Monte-Carlo-dropout uncertainty, a polynomial baseline, and a hybrid
//! navigation simulator in which accumulated uncertainty triggers x-ray
//! recalibration.

pub mod config;
pub mod distortion;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod navsim;
pub mod nn;
pub mod poly;
pub mod scenario;
pub mod uncertainty;

pub use error::{Error, Result};
