use thiserror::Error;

/// Errors raised by the simulation, set-construction and control routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("integration diverged: non-finite state after t = {last_valid_t}")]
    Divergence { last_valid_t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}); system too stiff for the explicit integrator")]
    Stiffness { t: f64, h: f64 },

    #[error("negative integration time {0}")]
    NegativeTime(f64),

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("point lies outside the domain: {0}")]
    OutsideDomain(String),

    #[error("orbit is not interior to X (r_* = {r_star:e})")]
    NotInterior { r_star: f64 },

    #[error("input matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("certificate failure: {0}")]
    Certificate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
