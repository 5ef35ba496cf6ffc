//! Regularized relevance rewards for RL fine-tuning.
//!
//! The crate bundles:
//!
//! - [`text`]: canonical tokenization, length incentive and repetition penalty
//! - [`embedding`]: the embedder abstraction with a hashed built-in and a remote client
//! - [`query_type`]: open-ended / closed-ended query classification
//! - [`reward`]: the composite reward, its ablation variants and calibration
//! - [`synrel`]: adversarial relevance triplets and preference accuracy
//! - [`ppo`]: a small categorical-policy PPO sandbox for studying reward hacking
//! - [`metrics`]: win rate, Self-BLEU, relevant-sentence ratio, length stats
//! - [`jsonl`]: line-oriented readers and writers shared by the CLI

pub mod embedding;
pub mod error;
pub mod jsonl;
pub mod metrics;
pub mod ppo;
pub mod query_type;
pub mod reward;
pub mod synrel;
pub mod text;

pub use embedding::{
    relevance_score, Embedder, EmbedderDescriptor, EmbedderKind, EmbeddingVector, HashedEmbedder,
    RemoteEmbedder, Similarity,
};
pub use error::{Error, Result};
pub use query_type::{Classifier, ClassifierDescriptor, QueryType};
pub use reward::{
    apply_calibration, fit_calibration, Branch, CalibrationMap, RewardBreakdown, RewardModel,
    RewardOptions, RewardVariant, ScoreInput,
};
pub use text::{length_incentive, repetition_penalty, split_sentences, tokenize, TokenizedText};
