use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid or missing configuration input.
    #[error("configuration error: {0}")]
    Config(String),

    /// Arguments outside the domain of a model function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical failure (NaN, excessive drift, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A hazard exceeded its declared bound during thinning.
    #[error("hazard {hazard} = {value} exceeds declared bound {bound} at t = {time}")]
    BoundViolation {
        hazard: String,
        value: f64,
        bound: f64,
        time: f64,
    },

    /// A mean path was used with a scenario or grid other than the one it was computed for.
    #[error("mean path fingerprint {found} does not match scenario/grid fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, Error>;
