use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSpec(ValidationReport),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("time index {t} out of range (horizon {horizon})")]
    TimeOutOfRange { t: usize, horizon: usize },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("particle ensemble must contain at least one particle")]
    EmptyEnsemble,

    #[error("particle death at t={t}: every particle weight is zero")]
    ParticleDeath { t: usize },

    #[error("noise history was not retained for this ensemble")]
    HistoryDisabled,

    #[error("Kalman oracle needs Gaussian noise, but {which} at t={t} is not")]
    NonGaussianNoise { which: &'static str, t: usize },

    #[error("innovation covariance is singular at t={t}")]
    SingularInnovation { t: usize },

    #[error("observation record up to t={t} has zero likelihood under the model")]
    ImpossibleObservation { t: usize },

    #[error("enumeration needs {needed} live paths at t={t}, over the budget of {budget}")]
    PathBudgetExceeded { t: usize, needed: usize, budget: usize },

    #[error("oracle not applicable: {0}")]
    OracleNotApplicable(String),

    #[error("invalid noise distribution: {0}")]
    InvalidNoise(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),
}
