use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class {class} has no samples")]
    MissingClass { class: usize },

    #[error("degenerate features: centred class means are all zero")]
    DegenerateFeatures,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("implicit differentiation precondition failed: {0}")]
    SingularSystem(String),
}
