//! Longitudinal chest-CT screening pipeline.
//!
//! The crate is organised around the stages of a screening read: synthetic
//! cohort generation ([`phantom`]), classical preprocessing ([`preprocess`]),
//! nodule detection ([`detect`]), candidate tracking across timepoints
//! ([`candidate`]), malignancy scoring ([`classify`]), clinical-covariate
//! baselines ([`metadata`]) and the evaluation harness ([`harness`]).
//! Volumes and their on-disk format live in [`volume`]; the small neural-net
//! substrate shared by detector and classifier lives in [`nn`].

pub mod candidate;
pub mod classify;
pub mod config;
pub mod detect;
pub mod harness;
pub mod metadata;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use config::{Profile, RunConfig};
pub use volume::{CtVolume, SeriesCase, Spacing};

/// Error type shared across the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed volume file {path}: {reason}")]
    Format { path: std::path::PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("no lung found: {0}")]
    NoLung(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("positive patch requested but the scan has no annotations")]
    NoAnnotations,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("no proposals to choose from: {0}")]
    NoProposals(String),
    #[error("candidate centre outside volume: {0}")]
    CenterOutOfVolume(String),
    #[error("unknown category: {0}")]
    UnknownCategory(String),
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("missing coefficient: {0}")]
    MissingCoefficients(String),
    #[error("too few patients: {0}")]
    TooFewPatients(String),
    #[error("non-finite feature: {0}")]
    NonFiniteFeature(String),
    #[error("fold {fold} failed: {source}")]
    Fold { fold: usize, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;
