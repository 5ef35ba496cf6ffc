//! Adversarial relevance triplets.
//!
//! Each triplet pairs a short, on-topic response with a long response about a
//! different entity. A scorer that is sensitive to relevance prefers the
//! short one; a scorer that rewards length prefers the long one.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{relevance_score, Embedder};
use crate::error::{Error, Result};
use crate::text;

pub const QUERY_TEMPLATE_PREFIX: &str = "Please tell me about ";
/// Rejected responses are at least this many times longer (in words) than chosen ones.
pub const LENGTH_RATIO: usize = 3;
pub const MAX_CHOSEN_PROPERTIES: usize = 2;
pub const MAX_CYCLES: usize = 10;

const ELABORATIONS: &[&str] = &[
    "{e} is {p}.",
    "It is widely documented that {e} is {p}.",
    "Many accounts agree that {e} is {p}.",
    "In addition, {e} is {p}.",
    "Observers frequently point out that {e} is {p}.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity: String,
    pub properties: Vec<String>,
}

impl EntityRecord {
    pub fn is_valid(&self) -> bool {
        !self.entity.trim().is_empty() && self.properties.iter().any(|p| !p.trim().is_empty())
    }

    fn props(&self) -> impl Iterator<Item = &str> {
        self.properties
            .iter()
            .map(|p| p.trim().trim_end_matches('.'))
            .filter(|p| !p.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceTriplet {
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_entity: String,
    pub rejected_entity: String,
}

impl RelevanceTriplet {
    /// Checks the structural guarantees every generated triplet carries.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.query != format!("{QUERY_TEMPLATE_PREFIX}{}", self.chosen_entity) {
            return Err(format!(
                "query {:?} does not follow the template",
                self.query
            ));
        }
        if self.rejected_entity == self.chosen_entity {
            return Err("rejected entity equals chosen entity".into());
        }
        let chosen_words = text::words(&self.chosen).len();
        let rejected_words = text::words(&self.rejected).len();
        if rejected_words < LENGTH_RATIO * chosen_words {
            return Err(format!(
                "rejected has {rejected_words} words, need >= {}",
                LENGTH_RATIO * chosen_words
            ));
        }
        let entity_tokens: HashSet<String> = text::words(&self.chosen_entity).into_iter().collect();
        let chosen_tokens: HashSet<String> = text::words(&self.chosen).into_iter().collect();
        if !entity_tokens.is_subset(&chosen_tokens) {
            return Err("chosen text does not mention the entity".into());
        }
        if text::words(&self.rejected)
            .iter()
            .any(|w| entity_tokens.contains(w))
        {
            return Err("rejected text mentions the queried entity".into());
        }
        Ok(())
    }
}

fn compile_chosen(rec: &EntityRecord) -> String {
    rec.props()
        .take(MAX_CHOSEN_PROPERTIES)
        .map(|p| format!("{} is {p}.", rec.entity.trim()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cycles the negative entity's properties through elaboration templates
/// until the word budget is met. `None` if [`MAX_CYCLES`] cycles fall short.
fn compile_rejected(rec: &EntityRecord, min_words: usize) -> Option<String> {
    let props: Vec<&str> = rec.props().collect();
    let mut parts = Vec::new();
    let mut words = 0;
    for cycle in 0..MAX_CYCLES {
        for (j, p) in props.iter().enumerate() {
            let template = ELABORATIONS[(cycle + j) % ELABORATIONS.len()];
            let sentence = template.replace("{e}", rec.entity.trim()).replace("{p}", p);
            words += text::words(&sentence).len();
            parts.push(sentence);
            if words >= min_words {
                return Some(parts.join(" "));
            }
        }
    }
    None
}

/// Builds `n` triplets from an entity dump.
///
/// Entities are visited in a seeded random order. An entity is skipped (with a
/// warning) when no other entity yields a token-disjoint negative long enough
/// to meet the length ratio; the result may then hold fewer than `n` items.
pub fn generate(entities: &[EntityRecord], n: usize, seed: u64) -> Result<Vec<RelevanceTriplet>> {
    let valid: Vec<&EntityRecord> = entities.iter().filter(|e| e.is_valid()).collect();
    if valid.len() < 2 {
        return Err(Error::TooFewEntities {
            got: valid.len(),
            need: 2,
        });
    }
    if n > valid.len() {
        return Err(Error::TooManyRequested {
            requested: n,
            available: valid.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for &idx in &order {
        if out.len() == n {
            break;
        }
        let anchor = valid[idx];
        let entity_tokens: HashSet<String> = text::words(&anchor.entity).into_iter().collect();
        let chosen = compile_chosen(anchor);
        let min_words = LENGTH_RATIO * text::words(&chosen).len();

        let mut negatives: Vec<usize> = (0..valid.len()).filter(|&j| j != idx).collect();
        negatives.shuffle(&mut rng);
        let picked = negatives.into_iter().find_map(|j| {
            let neg = valid[j];
            if neg.entity.trim() == anchor.entity.trim() {
                return None;
            }
            let rejected = compile_rejected(neg, min_words)?;
            let clean = text::words(&rejected)
                .iter()
                .all(|w| !entity_tokens.contains(w));
            clean.then_some((neg, rejected))
        });
        match picked {
            Some((neg, rejected)) => out.push(RelevanceTriplet {
                query: format!("{QUERY_TEMPLATE_PREFIX}{}", anchor.entity.trim()),
                chosen,
                rejected,
                chosen_entity: anchor.entity.trim().to_owned(),
                rejected_entity: neg.entity.trim().to_owned(),
            }),
            None => tracing::warn!(
                entity = %anchor.entity,
                "no negative satisfies the length ratio; skipping"
            ),
        }
    }
    Ok(out)
}

/// Preference accuracy: `(#chosen preferred + 0.5 * #ties) / #triplets`.
pub fn evaluate_accuracy<F>(triplets: &[RelevanceTriplet], mut scorer: F) -> Result<f64>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    if triplets.is_empty() {
        return Err(Error::InvalidInput("no triplets to evaluate".into()));
    }
    let mut credit = 0.0;
    for (index, t) in triplets.iter().enumerate() {
        let fail = |e: Error| Error::ScorerFailed {
            index,
            message: e.to_string(),
        };
        let good = scorer(&t.query, &t.chosen).map_err(fail)?;
        let bad = scorer(&t.query, &t.rejected).map_err(fail)?;
        if good > bad {
            credit += 1.0;
        } else if good == bad {
            credit += 0.5;
        }
    }
    Ok(credit / triplets.len() as f64)
}

/// Built-in scorer choices for the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Inner product between embedded query and response.
    Relevance,
    /// Word count of the response; longer wins.
    Length,
    /// Always 0; every comparison ties.
    Constant,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relevance" | "embedder" => Ok(ScorerKind::Relevance),
            "length" | "longer" => Ok(ScorerKind::Length),
            "constant" => Ok(ScorerKind::Constant),
            other => Err(Error::InvalidInput(format!("unknown scorer {other:?}"))),
        }
    }
}

pub fn evaluate_with(
    triplets: &[RelevanceTriplet],
    kind: ScorerKind,
    embedder: &dyn Embedder,
) -> Result<f64> {
    match kind {
        ScorerKind::Relevance => evaluate_accuracy(triplets, |q, r| {
            let v = embedder.embed(&[q, r])?;
            relevance_score(&v[0], &v[1])
        }),
        ScorerKind::Length => evaluate_accuracy(triplets, |_, r| Ok(text::words(r).len() as f64)),
        ScorerKind::Constant => evaluate_accuracy(triplets, |_, _| Ok(0.0)),
    }
}
