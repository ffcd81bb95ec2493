use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("client weights sum to {sum}, expected 1")]
    WeightSumError { sum: f64 },
    #[error("client {client}: invalid weight {weight}")]
    BadWeight { client: usize, weight: f64 },
    #[error("client {client}: bad schedule ({reason})")]
    BadSchedule { client: usize, reason: String },
    #[error("client id {id} is duplicated or out of range")]
    DuplicateId { id: usize },
    #[error("invalid solver parameters: {0}")]
    BadSolver(String),
    #[error("proximal solver is not contractive: eta * mu = {product} >= 1")]
    NonContractive { product: f64 },
    #[error("numerical blowup: {0}")]
    NumericalBlowup(String),
    #[error("all gradient norms are zero")]
    AllZeroGradients,
    #[error("client {client}: failure probability {q} is too close to 1")]
    DegenerateLink { client: usize, q: f64 },
    #[error("infeasible co-design: {0}")]
    Infeasible(String),
    #[error("wrong problem shape: {0}")]
    WrongShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, FedError>;
