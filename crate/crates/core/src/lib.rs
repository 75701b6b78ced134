//! Level-aware multi-view, multi-task regression over cached image embeddings.
//!
//! The crate is organised around the stages of an experiment:
//!
//! - [`store`]: embedding caches on disk, metadata cleaning, level grouping.
//! - [`nn`]: a small dense network engine (forward/backward, Adam, gradient checks, checkpoints).
//! - [`prior`]: level prompts, their text-embedding lookup table and the auxiliary level regressor.
//! - [`fusion`]: view aggregation, visual/text fusion, the two regressors and their training.
//! - [`eval`]: plant-held-out splits, error metrics, view-removal sweeps and reports.
//! - [`synth`]: synthetic caches with a known linear generative model.
//! - [`config`]: run configuration files.

pub mod codec;
pub mod config;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod prior;
pub mod store;
pub mod synth;

/// Width of every image and text embedding handled by the pipeline.
pub const EMBEDDING_DIM: usize = 512;

/// Number of rotational views captured per level.
pub const VIEWS_PER_LEVEL: usize = 24;

/// Number of camera height levels.
pub const LEVEL_COUNT: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Prior(#[from] prior::PriorError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
