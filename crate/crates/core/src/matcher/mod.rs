//! Claim matching and before/after comparisons.

mod embed;
mod score;
mod stats;

pub use embed::{
    embed_texts, embed_texts_lenient, fnv1a, tokenize, CommandEmbedder, Embedder, EmbeddingVector, HashEmbedder,
    ENV_EMBEDDER_CMD,
};
pub use score::{
    compare_phases, cosine, score_archive, score_run, score_vector, score_video, video_text, Aggregate, ClaimIndex,
    DayDelta, GroupComparison, RunScores, ScoredArchive, ScoredVideo, SimilarityResult,
};
pub use stats::{average_ranks, mann_whitney, mean, quantile, Bootstrap, MannWhitney};

use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("text {0} is empty")]
    EmptyText(usize),
    #[error("text has no tokens to embed: {0:?}")]
    ZeroVector(String),
    #[error("vector dimension {0} does not match {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-length vector in cosine")]
    ZeroNorm,
    #[error("embedding backend failed: {0}")]
    Embed(String),
    #[error("comparison needs non-empty samples")]
    EmptySample,
    #[error("non-finite score")]
    NonFinite,
    #[error("no claims to match against")]
    NoClaims,
    #[error("{0}")]
    Config(String),
    #[error("archive has no plan.json")]
    MissingPlan,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = MatchError> = std::result::Result<T, E>;
