use thiserror::Error;

use crate::qsys::Pair;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid dipole matrix: {0}")]
    InvalidDipole(String),

    #[error("invalid control waveform: {0}")]
    InvalidControl(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("transition frequencies are degenerate: {0}")]
    DegenerateSpectrum(String),

    #[error("step policy failure: {0}")]
    StepPolicy(String),

    #[error("pair {0} is not in the dipole support")]
    NotInSupport(Pair),

    #[error("system is not controllable: {0}")]
    Uncontrollable(String),

    #[error("steering stalled at fidelity {best_fidelity:.3e} (target {target:.3e})")]
    SteeringFailed { best_fidelity: f64, target: f64 },

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSystem(_) => "invalid_system",
            Error::InvalidDipole(_) => "invalid_dipole",
            Error::InvalidControl(_) => "invalid_control",
            Error::InvalidState(_) => "invalid_state",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateSpectrum(_) => "degenerate_spectrum",
            Error::StepPolicy(_) => "step_policy",
            Error::NotInSupport(_) => "not_in_support",
            Error::Uncontrollable(_) => "uncontrollable",
            Error::SteeringFailed { .. } => "steering_failed",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
