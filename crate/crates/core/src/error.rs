//! Crate-wide error type. Variants map onto the failure surfaces the CLI
//! reports (dataset, config, checkpoint, numerics).

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("mesh: {0}")]
    Mesh(String),
    #[error("optimization diverged: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
