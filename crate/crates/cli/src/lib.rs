//! Configuration, scoring engine and HTTP service behind the `r3` binary.

pub mod config;
pub mod engine;
pub mod error;
pub mod service;

pub use config::{ConfigError, EngineConfig, KeyValues, PpoRunConfig};
pub use engine::{Engine, QueryTypeSource, ScoreRequest, ScoreResponse};
pub use error::{AppError, ErrorBody};
