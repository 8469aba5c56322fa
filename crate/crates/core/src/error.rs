use std::io;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("conjugate gradient did not converge after {iters} iterations (relative residual {residual:.3e})")]
    Convergence { iters: usize, residual: f64 },

    #[error("numerical divergence at iteration {iter}: {what}")]
    Divergence { iter: usize, what: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("operator capability missing: {0}")]
    Capability(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("denoiser protocol error: {0}")]
    Protocol(String),

    #[error("denoiser transport failed after {retries} retries: {source}")]
    Transport {
        retries: u32,
        #[source]
        source: io::Error,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
