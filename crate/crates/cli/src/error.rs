use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A stage was asked to run before its inputs exist.
    #[error("missing input {}: run `crepe {stage}` first", path.display())]
    MissingDependency { path: PathBuf, stage: &'static str },

    /// Existing artifacts were produced under a different configuration.
    /// Rebuilding in place would silently mix runs, so this is a hard stop.
    #[error(
        "stage {stage} artifacts in this output directory were produced with \
         config hash {old}, current config hashes to {new}; point --out at a \
         fresh directory, or delete {} to rebuild here",
        manifest.display()
    )]
    StaleConfig {
        stage: &'static str,
        old: String,
        new: String,
        manifest: PathBuf,
    },

    #[error("config error in {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] crepe_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
