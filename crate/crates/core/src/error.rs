use alloc::string::String;

use crate::dag::StateId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("environment graph contains a cycle")]
    CycleDetected,
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("policy does not match the environment at state {0}")]
    PolicyMismatch(StateId),
    #[error("policy leaks probability: terminal mass {mass}")]
    NonTerminatingPolicy { mass: f64 },
    #[error("more than {cap} complete trajectories")]
    TooManyTrajectories { cap: usize },
    #[error("trajectory exceeded {limit} steps")]
    MaxLengthExceeded { limit: usize },
    #[error("invalid grid {height}x{width}")]
    InvalidGrid { height: usize, width: usize },
    #[error("unknown reward `{0}`")]
    UnknownReward(String),
    #[error("unknown parameter `{param}` for reward `{reward}`")]
    UnknownRewardParam { reward: String, param: String },
    #[error("invalid reward parameter `{0}`")]
    InvalidRewardParam(String),
    #[error("reward field is constant")]
    DegenerateField,
    #[error("reward is zero on every terminating state")]
    ZeroReward,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error("mixing policy has no outgoing mass at state {0}")]
    DeadState(StateId),
    #[error("composition is zero on every terminating state")]
    ZeroMass,
    #[error("invalid composition: {0}")]
    InvalidComposition(String),
}

impl Error {
    /// Failures caused by the numbers rather than by the inputs' shape.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DivergedLoss { .. }
                | Error::DeadState(_)
                | Error::ZeroMass
                | Error::NonTerminatingPolicy { .. }
        )
    }
}
