//! Crate-wide error type.
//!
//! The CLI maps variants onto exit codes: config errors exit 2, missing
//! stage prerequisites exit 3, training divergence exits 4, everything
//! else exits 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (volume header, checkpoint, manifest...).
    #[error("format error: {0}")]
    Format(String),

    /// A contract precondition was violated by the caller.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Bad experiment configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("missing prerequisite: run `{0}` first")]
    MissingPrerequisite(String),

    /// A loss turned non-finite; the message names the offending term.
    #[error("training diverged: non-finite {0}")]
    TrainingDiverged(String),

    #[error("no lung region")]
    NoLungRegion,

    #[error("patch does not fit: {patch}x{patch} patch vs {bbox_h}x{bbox_w} mask bounding box")]
    PatchDoesNotFit {
        patch: usize,
        bbox_h: usize,
        bbox_w: usize,
    },

    /// Provenance chain broken: an artifact was produced by different weights.
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite(_) => 3,
            Error::TrainingDiverged(_) => 4,
            _ => 1,
        }
    }
}
