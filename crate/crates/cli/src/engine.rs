//! The scoring engine shared by the CLI and the HTTP service.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use r3_core::{
    CalibrationMap, Classifier, QueryType, RewardBreakdown, RewardModel, RewardVariant, ScoreInput,
};

use crate::config::EngineConfig;
use crate::error::AppError;

/// One scoring request as accepted by `score` and `/v1/score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_type: Option<QueryType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<RewardVariant>,
}

const SCORE_FIELDS: &[&str] = &["query", "response", "reference", "query_type", "variant"];

/// Rejects keys outside `allowed` when `strict`.
pub fn check_fields(value: &Value, allowed: &[&str], strict: bool) -> Result<(), AppError> {
    let Some(obj) = value.as_object() else {
        return Err(AppError::request(
            "INVALID_REQUEST",
            "expected a JSON object",
        ));
    };
    if strict {
        if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(AppError::request(
                "UNKNOWN_FIELD",
                format!("unknown field {k:?}; expected one of {allowed:?}"),
            ));
        }
    }
    Ok(())
}

impl ScoreRequest {
    pub fn from_value(value: Value, strict: bool) -> Result<Self, AppError> {
        check_fields(&value, SCORE_FIELDS, strict)?;
        serde_json::from_value(value)
            .map_err(|e| AppError::request("INVALID_REQUEST", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTypeSource {
    Request,
    Classifier,
}

/// A reward breakdown plus the query type it was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
    pub query_type: QueryType,
    pub query_type_source: QueryTypeSource,
}

/// Immutable scoring state: model, classifier, default variant and limits.
#[derive(Debug)]
pub struct Engine {
    model: RewardModel,
    classifier: Classifier,
    variant: RewardVariant,
    tau: f64,
    max_batch: usize,
    max_text_bytes: usize,
    max_in_flight: usize,
    strict: bool,
}

impl Engine {
    pub fn from_config(cfg: &EngineConfig) -> Result<Self, AppError> {
        cfg.validate()?;
        let embedder = cfg.embedder.build()?;
        let calibration = cfg
            .calibration_path
            .as_deref()
            .map(CalibrationMap::load)
            .transpose()?;
        if let Some(dim) = calibration.as_ref().and_then(|c| c.embedder_dim) {
            if dim != embedder.dim() {
                return Err(AppError::config(
                    "calibration",
                    format!(
                        "fitted with a {dim}-dimensional embedder, configured embedder has {}",
                        embedder.dim()
                    ),
                ));
            }
        }
        Ok(Self {
            model: RewardModel::new(embedder, calibration, cfg.options),
            classifier: Classifier::from_descriptor(&cfg.classifier)?,
            variant: cfg.variant,
            tau: cfg.tau,
            max_batch: cfg.max_batch,
            max_text_bytes: cfg.max_text_bytes,
            max_in_flight: cfg.max_in_flight,
            strict: cfg.strict,
        })
    }

    /// A long-running service must be able to score every query type.
    pub fn check_serving_preconditions(&self) -> Result<(), AppError> {
        if self.variant.needs_reference(QueryType::ClosedEnded)
            && self.model.calibration().is_none()
        {
            return Err(AppError::config(
                "calibration",
                format!(
                    "variant {} scores closed-ended queries through a calibration map; none configured",
                    self.variant
                ),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn variant(&self) -> RewardVariant {
        self.variant
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn embedder_dim(&self) -> usize {
        self.model.embedder().dim()
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn max_text_bytes(&self) -> usize {
        self.max_text_bytes
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    fn check_len(&self, field: &str, text: &str) -> Result<(), AppError> {
        if text.len() > self.max_text_bytes {
            return Err(AppError::request(
                "TEXT_TOO_LARGE",
                format!(
                    "{field} is {} bytes, limit is {}",
                    text.len(),
                    self.max_text_bytes
                ),
            ));
        }
        Ok(())
    }

    pub fn check_batch(&self, n: usize) -> Result<(), AppError> {
        if n > self.max_batch {
            return Err(AppError::request(
                "BATCH_TOO_LARGE",
                format!("batch has {n} requests, limit is {}", self.max_batch),
            ));
        }
        Ok(())
    }

    pub fn classify(&self, conversation: &str) -> Result<QueryType, AppError> {
        self.check_len("conversation", conversation)?;
        Ok(self.classifier.classify(conversation)?)
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, AppError> {
        self.check_len("query", &req.query)?;
        self.check_len("response", &req.response)?;
        if let Some(r) = &req.reference {
            self.check_len("reference", r)?;
        }
        let (query_type, query_type_source) = match req.query_type {
            Some(t) => (t, QueryTypeSource::Request),
            None => (
                self.classifier.classify(&req.query)?,
                QueryTypeSource::Classifier,
            ),
        };
        let breakdown = self.model.score(
            &ScoreInput {
                query: &req.query,
                query_type,
                response: &req.response,
                reference: req.reference.as_deref(),
            },
            req.variant.unwrap_or(self.variant),
        )?;
        Ok(ScoreResponse {
            breakdown,
            query_type,
            query_type_source,
        })
    }
}
