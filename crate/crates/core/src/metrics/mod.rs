//! Alignment metrics: individual aggregation, discrete and KDE-based KL
//! divergence, cosine similarity, embedders, perplexity scorers and TTR.

mod embed;
mod individual;
mod kde;
mod kl;
mod perplexity;
mod similarity;
mod ttr;

pub use embed::{Embedder, HashEmbedder, RemoteEmbedder, DEFAULT_EMBED_DIM};
pub use individual::{aggregate_individual, Aggregator, IndividualScore};
pub use kde::{kde_logpdf, mc_kl, KdeModel, KlEstimate, SampleSet, LOG_DENSITY_FLOOR};
pub use kl::{discrete_kl, Histogram, DEFAULT_EPSILON};
pub use perplexity::{BigramLm, PerplexityScorer, RemotePerplexity};
pub use similarity::{cosine_similarity, Cosine};
pub use ttr::ttr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("histograms have different bins")]
    BinMismatch,
    #[error("smoothing epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
}
