//! Sock-puppet audit of whether third-party tracking on news sites shifts
//! video homepage recommendations toward misinformation.
//!
//! The pipeline: [`corpus`] loads outlets, articles and fact-checked claims;
//! [`experiment`] plans puppets and runs the setting, exposure and
//! measurement phases through a [`session::SessionFactory`]; [`store`]
//! persists everything to an append-only run archive; [`matcher`] scores
//! captured videos against claims and compares phases. [`mockworld`] is a
//! deterministic stand-in for the web and the recommender.

pub mod corpus;
pub mod experiment;
pub mod matcher;
pub mod mockworld;
pub mod scalar;
pub mod seeding;
pub mod session;
pub mod store;
pub mod timefmt;

pub use corpus::{ArticlePool, ArticleRecord, ClaimRecord, CorpusError, OutletRecord};
pub use experiment::{ExperimentConfig, ExperimentError, ExperimentPlan, Group, PuppetSpec, RunState};
pub use matcher::{Aggregate, MatchError};
pub use mockworld::{MockWorld, WorldConfig};
pub use scalar::Scalar;
pub use session::{Environment, RecommendationSnapshot, SessionError, VideoRecord, VisitLog};
pub use store::{RunArchive, StoreError};

pub type Embedding = matcher::EmbeddingVector<f64>;
pub type Embedding32 = matcher::EmbeddingVector<f32>;
pub type Similarity = matcher::SimilarityResult<f64>;
pub type Similarity32 = matcher::SimilarityResult<f32>;
pub type Comparison = matcher::GroupComparison<f64>;
pub type Comparison32 = matcher::GroupComparison<f32>;
pub type RunScores = matcher::RunScores<f64>;
