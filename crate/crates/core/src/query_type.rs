//! Query-type resolution `T(x)`: open-ended versus closed-ended.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::fnv1a64;
use crate::error::{Error, Result};
use crate::text;

/// Prompt template for LLM-backed classifiers; `{conversation}` is the slot.
pub const CLASSIFICATION_PROMPT: &str = include_str!("../data/query_type_prompt.txt");

pub fn render_prompt(conversation: &str) -> String {
    CLASSIFICATION_PROMPT.replace("{conversation}", conversation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryType {
    OpenEnded,
    ClosedEnded,
}

impl QueryType {
    pub const ALL: [QueryType; 2] = [QueryType::OpenEnded, QueryType::ClosedEnded];

    /// Interface label.
    pub fn label(self) -> &'static str {
        match self {
            QueryType::OpenEnded => "OPEN-ENDED",
            QueryType::ClosedEnded => "CLOSED-ENDED",
        }
    }

    /// Short form used in reward breakdowns.
    pub fn short(self) -> &'static str {
        match self {
            QueryType::OpenEnded => "OE",
            QueryType::ClosedEnded => "CE",
        }
    }

    pub fn index(self) -> usize {
        match self {
            QueryType::OpenEnded => 0,
            QueryType::ClosedEnded => 1,
        }
    }

    /// Lenient label parsing: surrounding whitespace, quotes and case are ignored.
    pub fn parse_label(raw: &str) -> Result<Self> {
        let cleaned = raw
            .trim()
            .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '.') || c.is_whitespace())
            .to_ascii_uppercase();
        match cleaned.as_str() {
            "OPEN-ENDED" | "OE" => Ok(QueryType::OpenEnded),
            "CLOSED-ENDED" | "CE" => Ok(QueryType::ClosedEnded),
            _ => Err(Error::UnknownLabel(raw.to_owned())),
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_label(s)
    }
}

impl Serialize for QueryType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for QueryType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        QueryType::parse_label(&s).map_err(serde::de::Error::custom)
    }
}

/// What to do when an external classifier fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Propagate the error.
    #[default]
    None,
    Heuristic,
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum ClassifierDescriptor {
    #[default]
    Heuristic,
    Random {
        seed: u64,
    },
    External {
        endpoint: String,
        #[serde(default)]
        fallback: Fallback,
    },
}

/// A resolved classifier; cheap to clone and safe to share.
#[derive(Debug, Clone)]
pub enum Classifier {
    Heuristic,
    Random { seed: u64 },
    External(ExternalClassifier),
}

impl Classifier {
    pub fn from_descriptor(desc: &ClassifierDescriptor) -> Result<Self> {
        Ok(match desc {
            ClassifierDescriptor::Heuristic => Classifier::Heuristic,
            ClassifierDescriptor::Random { seed } => Classifier::Random { seed: *seed },
            ClassifierDescriptor::External { endpoint, fallback } => {
                if endpoint.trim().is_empty() {
                    return Err(Error::Config {
                        field: "classifier.endpoint".into(),
                        message: "required for the external classifier".into(),
                    });
                }
                Classifier::External(ExternalClassifier::new(endpoint, *fallback)?)
            }
        })
    }

    pub fn classify(&self, query: &str) -> Result<QueryType> {
        match self {
            Classifier::Heuristic => Ok(classify_heuristic(query)),
            Classifier::Random { seed } => Ok(classify_random(query, *seed)),
            Classifier::External(ext) => ext.classify(query),
        }
    }
}

// Openers that ask for lists or advice; checked before the closed-ended rules.
const OPEN_PREFIXES: &[&[&str]] = &[
    &["what", "are", "some"],
    &["what", "is", "some"],
    &["what", "are", "good"],
    &["what", "is", "a", "good"],
    &["what", "are", "the", "best"],
    &["what", "should"],
    &["what", "would"],
    &["what", "can", "i"],
    &["what", "could"],
];

const CLOSED_PREFIXES: &[&[&str]] = &[
    &["how", "many"],
    &["how", "much"],
    &["what"],
    &["when"],
    &["who"],
    &["where"],
    &["which"],
    &["is"],
    &["are"],
    &["do"],
    &["does"],
    &["did"],
    &["can"],
    &["will"],
    &["was"],
    &["were"],
];

fn starts_with_words(words: &[String], prefix: &[&str]) -> bool {
    words.len() >= prefix.len() && words.iter().zip(prefix).all(|(w, p)| w == p)
}

fn clauses(text: &str) -> Vec<&str> {
    text.split(['.', ',', ';', ':', '?', '!', '\n'])
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .collect()
}

/// Rule-based stand-in for an LLM classifier.
///
/// Looks at the first clause of the last user turn; a leading `if ...`
/// conditional is skipped in favour of the clause that follows it.
pub fn classify_heuristic(query: &str) -> QueryType {
    let turn = text::last_user_turn(query);
    let parts = clauses(turn);
    let mut clause = parts.first().copied().unwrap_or("");
    if text::words(clause).first().map(String::as_str) == Some("if") && parts.len() > 1 {
        clause = parts[1];
    }
    let words = text::words(clause);
    if OPEN_PREFIXES.iter().any(|p| starts_with_words(&words, p)) {
        return QueryType::OpenEnded;
    }
    if CLOSED_PREFIXES.iter().any(|p| starts_with_words(&words, p)) {
        return QueryType::ClosedEnded;
    }
    QueryType::OpenEnded
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded coin flip keyed on the query text.
pub fn classify_random(query: &str, seed: u64) -> QueryType {
    let h = splitmix64(fnv1a64(query.as_bytes()) ^ splitmix64(seed));
    if h >> 63 == 0 {
        QueryType::OpenEnded
    } else {
        QueryType::ClosedEnded
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    conversation: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    label: String,
}

/// Client for `POST {endpoint}/v1/classify`.
#[derive(Debug, Clone)]
pub struct ExternalClassifier {
    endpoint: String,
    fallback: Fallback,
    client: reqwest::blocking::Client,
}

impl ExternalClassifier {
    pub fn new(endpoint: &str, fallback: Fallback) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Config {
                field: "classifier.endpoint".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            fallback,
            client,
        })
    }

    fn request(&self, conversation: &str) -> Result<QueryType> {
        let transport = |message: String| Error::ClassifierTransport {
            endpoint: self.endpoint.clone(),
            message,
        };
        let resp = self
            .client
            .post(format!("{}/v1/classify", self.endpoint))
            .json(&ClassifyRequest { conversation })
            .send()
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(transport(format!("HTTP {status}")));
        }
        let body: ClassifyResponse = resp
            .json()
            .map_err(|e| transport(format!("malformed response: {e}")))?;
        QueryType::parse_label(&body.label)
    }

    pub fn classify(&self, query: &str) -> Result<QueryType> {
        match self.request(query) {
            Ok(t) => Ok(t),
            Err(err) => match self.fallback {
                Fallback::None => Err(err),
                Fallback::Heuristic => {
                    tracing::warn!(%err, "external classifier failed; using heuristic");
                    Ok(classify_heuristic(query))
                }
                Fallback::OpenEnded => {
                    tracing::warn!(%err, "external classifier failed; defaulting to OPEN-ENDED");
                    Ok(QueryType::OpenEnded)
                }
            },
        }
    }
}
