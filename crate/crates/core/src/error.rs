use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or lengths of inputs do not agree.
    #[error("structural error: {0}")]
    Structure(String),

    /// Values violate a documented domain constraint.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range 1..={max}")]
    Bounds { index: usize, max: usize },

    /// A state component went negative during integration.
    #[error("numerical instability at day {day}: {component} = {value:e}")]
    Instability {
        day: usize,
        component: String,
        value: f64,
    },

    #[error("sampler failure: {0}")]
    Sampler(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn structure(msg: impl Into<String>) -> Error {
    Error::Structure(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
