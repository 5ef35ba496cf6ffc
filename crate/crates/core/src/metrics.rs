//! Evaluation arithmetic: adjusted win rate, Self-BLEU, the
//! relevant-sentence ratio proxy and length statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embedding::{relevance_score, Embedder};
use crate::error::{Error, Result};
use crate::text;

/// Default relevance threshold for the built-in hashed embedder.
pub const DEFAULT_TAU: f64 = 0.15;

pub const MAX_BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseOutcome {
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
}

impl PairwiseOutcome {
    pub fn new(wins: u64, ties: u64, losses: u64) -> Self {
        Self { wins, ties, losses }
    }

    pub fn total(&self) -> u64 {
        self.wins + self.ties + self.losses
    }

    /// The same comparisons seen from the other side.
    pub fn swapped(&self) -> Self {
        Self::new(self.losses, self.ties, self.wins)
    }
}

/// `(wins + 0.5 * ties) / total`.
pub fn adjusted_win_rate(o: &PairwiseOutcome) -> Result<f64> {
    let total = o.total();
    if total == 0 {
        return Err(Error::InvalidInput(
            "win rate needs at least one comparison".into(),
        ));
    }
    Ok((o.wins as f64 + 0.5 * o.ties as f64) / total as f64)
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in words.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// BLEU of one hypothesis against several references.
///
/// Orders 1..=4 with uniform weights; clipped counts take the maximum
/// reference count; orders >= 2 use add-one smoothing on both numerator and
/// denominator. The brevity penalty uses the closest reference length
/// (ties go to the shorter one).
pub fn sentence_bleu(hypothesis: &[String], references: &[Vec<String>]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_BLEU_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / MAX_BLEU_ORDER as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleu {
    pub score: f64,
    /// Per-response BLEU against the rest.
    pub per_response: Vec<f64>,
    /// Indices of empty responses (each contributed 0).
    pub empty: Vec<usize>,
}

/// Mean BLEU of each response against all others. Higher means less diverse.
pub fn self_bleu(responses: &[&str]) -> Result<SelfBleu> {
    if responses.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "self-BLEU needs at least 2 responses, got {}",
            responses.len()
        )));
    }
    let tokenized: Vec<Vec<String>> = responses.iter().map(|r| text::words(r)).collect();
    let mut per_response = Vec::with_capacity(tokenized.len());
    let mut empty = Vec::new();
    for (i, hyp) in tokenized.iter().enumerate() {
        if hyp.is_empty() {
            empty.push(i);
            per_response.push(0.0);
            continue;
        }
        let refs: Vec<Vec<String>> = tokenized
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.clone())
            .collect();
        per_response.push(sentence_bleu(hyp, &refs));
    }
    let score = per_response.iter().sum::<f64>() / per_response.len() as f64;
    Ok(SelfBleu {
        score,
        per_response,
        empty,
    })
}

/// One sentence's relevance verdict; `relevant == (score >= threshold)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceJudgment {
    pub sentence: String,
    pub score: f64,
    pub relevant: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRatio {
    /// Embedder-threshold proxy for a human/LLM sentence judge.
    pub proxy_ratio: f64,
    pub judgments: Vec<SentenceJudgment>,
}

/// Fraction of response sentences whose relevance to the query reaches `tau`.
pub fn relevant_sentence_ratio(
    query: &str,
    response: &str,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<RelevanceRatio> {
    let sentences = text::split_sentences(response);
    if sentences.is_empty() {
        return Err(Error::InvalidInput("response has no sentences".into()));
    }
    let mut texts: Vec<&str> = Vec::with_capacity(sentences.len() + 1);
    texts.push(text::last_user_turn(query));
    texts.extend(sentences.iter().map(String::as_str));
    let vecs = embedder.embed(&texts)?;
    let (q, rest) = vecs
        .split_first()
        .ok_or_else(|| Error::InvalidInput("embedder returned no vectors".into()))?;
    let judgments = sentences
        .into_iter()
        .zip(rest)
        .map(|(sentence, v)| {
            let score = relevance_score(q, v)?;
            Ok(SentenceJudgment {
                sentence,
                score,
                relevant: score >= tau,
                threshold: tau,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let relevant = judgments.iter().filter(|j| j.relevant).count();
    Ok(RelevanceRatio {
        proxy_ratio: relevant as f64 / judgments.len() as f64,
        judgments,
    })
}

/// One labeled example for threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub query: String,
    pub sentence: String,
    pub relevant: bool,
}

/// Picks the threshold that best separates labeled relevant from irrelevant
/// sentences: candidates are midpoints between adjacent distinct scores and
/// ties in accuracy go to the candidate with the widest margin.
pub fn calibrate_threshold(labeled: &[LabeledSentence], embedder: &dyn Embedder) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("no labeled sentences".into()));
    }
    let mut scored = Vec::with_capacity(labeled.len());
    for item in labeled {
        let q = embedder.embed_one(text::last_user_turn(&item.query))?;
        let s = embedder.embed_one(&item.sentence)?;
        scored.push((relevance_score(&q, &s)?, item.relevant));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut candidates = vec![scored[0].0 - 1e-9];
    for w in scored.windows(2) {
        if w[1].0 > w[0].0 {
            candidates.push(0.5 * (w[0].0 + w[1].0));
        }
    }
    let accuracy = |tau: f64| {
        scored
            .iter()
            .filter(|(s, label)| (*s >= tau) == *label)
            .count()
    };
    let margin = |tau: f64| {
        scored
            .iter()
            .map(|(s, _)| (s - tau).abs())
            .fold(f64::INFINITY, f64::min)
    };
    let best = candidates
        .into_iter()
        .max_by(|&a, &b| {
            accuracy(a)
                .cmp(&accuracy(b))
                .then(margin(a).total_cmp(&margin(b)))
        })
        .unwrap_or(DEFAULT_TAU);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean_words: f64,
    pub mean_sentences: f64,
}

/// Mean word and sentence counts; `(0, 0)` for an empty list.
pub fn length_stats(responses: &[&str]) -> LengthStats {
    if responses.is_empty() {
        return LengthStats {
            mean_words: 0.0,
            mean_sentences: 0.0,
        };
    }
    let n = responses.len() as f64;
    let words: usize = responses.iter().map(|r| text::words(r).len()).sum();
    let sentences: usize = responses
        .iter()
        .map(|r| text::split_sentences(r).len())
        .sum();
    LengthStats {
        mean_words: words as f64 / n,
        mean_sentences: sentences as f64 / n,
    }
}

/// Relevance aggregated by sentence position (0 = first sentence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: usize,
    pub sentences: usize,
    pub relevant: usize,
    pub proxy_ratio: f64,
    pub mean_score: f64,
}

pub fn sentence_position_table(
    items: &[(String, String)],
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<Vec<PositionRow>> {
    let mut acc: Vec<(usize, usize, f64)> = Vec::new();
    for (query, response) in items {
        if text::split_sentences(response).is_empty() {
            continue;
        }
        let ratio = relevant_sentence_ratio(query, response, embedder, tau)?;
        for (pos, j) in ratio.judgments.iter().enumerate() {
            if acc.len() <= pos {
                acc.resize(pos + 1, (0, 0, 0.0));
            }
            acc[pos].0 += 1;
            acc[pos].1 += usize::from(j.relevant);
            acc[pos].2 += j.score;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(position, (n, rel, sum))| PositionRow {
            position,
            sentences: n,
            relevant: rel,
            proxy_ratio: rel as f64 / n as f64,
            mean_score: sum / n as f64,
        })
        .collect())
}

pub fn position_table_csv(rows: &[PositionRow]) -> String {
    let mut out = String::from("position,sentences,relevant,proxy_ratio,mean_score\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.position, r.sentences, r.relevant, r.proxy_ratio, r.mean_score
        );
    }
    out
}
