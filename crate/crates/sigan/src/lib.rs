//! Illumination harmonization toolkit.
//!
//! The crate covers the whole loop needed to study object/background
//! illumination mismatch on a desk-scale budget:
//!
//! * [`scene`] renders procedural six-tuple samples (composite, masks,
//!   environment maps, ground truth) with an analytic Lambertian scene model,
//! * [`store`] persists datasets with a manifest, deterministic splits and
//!   corpus statistics,
//! * [`autograd`] is a small reverse-mode tape over `ndarray` with exactly the
//!   operators the networks need,
//! * [`model`] builds the two-branch relighting generator (attention blocks,
//!   illumination exchange) and the patch discriminator,
//! * [`losses`] implements the four training terms and the frozen feature
//!   extractor behind the perceptual term,
//! * [`trainer`] runs the adversarial optimization loop with resumable
//!   checkpoints,
//! * [`eval`] computes RMSE / PSNR / SSIM reports, and
//! * [`cli`] wires everything into the `sigan` binary.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scene;
pub mod store;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to process exit codes:
/// configuration/usage problems, data problems (missing or malformed files,
/// incompatible checkpoints) and runtime failures (diverging training).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (CLI exit code 1).
    #[error("config error: {0}")]
    Config(String),

    /// Missing, malformed or incompatible data (CLI exit code 2).
    #[error("data error: {0}")]
    Data(String),

    /// Failure while running a computation (CLI exit code 3).
    #[error("runtime error: {0}")]
    Runtime(String),

    /// I/O failure, reported with the offending path where known.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Runtime(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
