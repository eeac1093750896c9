//! Finite-width neural tangent kernels, information-geometry indicators, and
//! training-time attack experiments comparing low-rank adaptation against full
//! fine-tuning on synthetic classification tasks.
//!
//! The crate is organized around the pipeline:
//!
//! - [`linalg`]: dense symmetric eigendecomposition, seeded initialization
//!   samplers, and the small matrix kernel everything else builds on.
//! - [`network`]: finite-width MLPs with optional per-layer low-rank adapters,
//!   forward tracing, and exact backpropagation per parameter group.
//! - [`kernels`]: empirical NTK via gradient inner products, the layerwise
//!   analytic recursions for full fine-tuning and LoRA, the delta kernel and
//!   its matrix `AᵀA − I`, and GP covariance Grams.
//! - [`infogeo`]: Fisher information through the kernel, information bits,
//!   Rényi/Shannon spectrum entropies, and the rank/variance entropy manifold.
//! - [`attacks`]: synthetic blob datasets, label-flip poisoning, trigger
//!   backdoors, and classification/attack-success metrics.
//! - [`trainer`]: deterministic minibatch SGD for both methods with parameter
//!   trajectory capture and the training-time robustness metrics.
//! - [`verify`]: the runnable suite of spectral/kernel checks behind
//!   `ttrlab verify` and the acceptance tests.
//! - [`sweep`]: seeded attack-sweep grids with CSV emission.

pub mod attacks;
pub mod config;
pub mod infogeo;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod sweep;
pub mod trainer;
pub mod verify;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape mismatch between operands (got/expected descriptions).
    Dim(String),
    /// A matrix required to be symmetric was not, within tolerance.
    Asymmetric { max_dev: f64, tol: f64 },
    /// Invalid configuration (rank bounds, empty grids, bad keys, ...).
    Config(String),
    /// Empty or inconsistent dataset.
    Data(String),
    /// A numerical routine left its contract (non-PSD kernel, all-zero
    /// spectrum, no eligible samples, ...).
    Numerical(String),
    /// Training diverged; carries the step at which loss became non-finite.
    TrainingDiverged { step: usize },
    /// Filesystem or parse failure for persisted artifacts.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(s) => write!(f, "dimension mismatch: {s}"),
            Error::Asymmetric { max_dev, tol } => {
                write!(f, "matrix not symmetric: max deviation {max_dev:e} exceeds {tol:e}")
            }
            Error::Config(s) => write!(f, "invalid config: {s}"),
            Error::Data(s) => write!(f, "bad dataset: {s}"),
            Error::Numerical(s) => write!(f, "numerical error: {s}"),
            Error::TrainingDiverged { step } => {
                write!(f, "training diverged: loss not finite at step {step}")
            }
            Error::Io(s) => write!(f, "io error: {s}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
