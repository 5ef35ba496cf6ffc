//! The regularized relevance reward and its ablation variants.
//!
//! Open-ended queries are scored `r_x · LI · RP`; closed-ended ones
//! `F(r_y) · RP`, where `F` is an affine [`CalibrationMap`] from the
//! reference-relevance range onto the length-incentive range. Relevance
//! scores are clamped at zero before any multiplication.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{similarity, Embedder, EmbeddingVector, Similarity};
use crate::error::{Error, Result};
use crate::query_type::QueryType;
use crate::text::{self, TokenizedText};

pub const MIN_CALIBRATION_PAIRS: usize = 20;
pub const DEFAULT_PERCENTILE_LO: f64 = 5.0;
pub const DEFAULT_PERCENTILE_HI: f64 = 95.0;

/// Affine map `F` with clamping outside `[src_lo, src_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub src_lo: f64,
    pub src_hi: f64,
    pub dst_lo: f64,
    pub dst_hi: f64,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_dim: Option<usize>,
}

impl CalibrationMap {
    pub fn new(src_lo: f64, src_hi: f64, dst_lo: f64, dst_hi: f64) -> Result<Self> {
        let map = Self {
            src_lo,
            src_hi,
            dst_lo,
            dst_hi,
            percentile_lo: 0.0,
            percentile_hi: 100.0,
            embedder_dim: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.src_lo, self.src_hi, self.dst_lo, self.dst_hi]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput(
                "calibration bounds must be finite".into(),
            ));
        }
        if self.src_lo >= self.src_hi {
            return Err(Error::DegenerateCalibration {
                lo: self.src_lo,
                hi: self.src_hi,
            });
        }
        if self.dst_lo > self.dst_hi {
            return Err(Error::InvalidInput(format!(
                "calibration target range inverted: [{}, {}]",
                self.dst_lo, self.dst_hi
            )));
        }
        Ok(())
    }

    /// `F(r_y)`.
    pub fn apply(&self, r_y: f64) -> f64 {
        if r_y <= self.src_lo {
            self.dst_lo
        } else if r_y >= self.src_hi {
            self.dst_hi
        } else {
            let t = (r_y - self.src_lo) / (self.src_hi - self.src_lo);
            self.dst_lo + t * (self.dst_hi - self.dst_lo)
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(s)?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn apply_calibration(map: &CalibrationMap, r_y: f64) -> f64 {
    map.apply(r_y)
}

/// Percentile by linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn sorted_finite(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what} contains non-finite values"
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Fits `F` from reference-relevance scores and length incentives observed
/// on a corpus of sampled responses.
pub fn fit_calibration(
    ry_scores: &[f64],
    li_values: &[f64],
    p_lo: f64,
    p_hi: f64,
) -> Result<CalibrationMap> {
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::InvalidPercentiles { lo: p_lo, hi: p_hi });
    }
    if ry_scores.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::CorpusTooSmall {
            got: ry_scores.len(),
            need: MIN_CALIBRATION_PAIRS,
        });
    }
    if li_values.is_empty() {
        return Err(Error::InvalidInput(
            "no responses to take LI bounds from".into(),
        ));
    }
    let ry = sorted_finite(ry_scores, "r_y scores")?;
    let li = sorted_finite(li_values, "LI values")?;
    let map = CalibrationMap {
        src_lo: percentile(&ry, p_lo),
        src_hi: percentile(&ry, p_hi),
        dst_lo: percentile(&li, p_lo),
        dst_hi: percentile(&li, p_hi),
        percentile_lo: p_lo,
        percentile_hi: p_hi,
        embedder_dim: None,
    };
    if map.src_lo >= map.src_hi {
        return Err(Error::DegenerateCalibration {
            lo: map.src_lo,
            hi: map.src_hi,
        });
    }
    Ok(map)
}

/// Embeds a `(reference, sampled response)` corpus and fits `F` on it.
pub fn fit_calibration_from_corpus(
    embedder: &dyn Embedder,
    pairs: &[(String, String)],
    p_lo: f64,
    p_hi: f64,
    sim: Similarity,
) -> Result<CalibrationMap> {
    if pairs.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::CorpusTooSmall {
            got: pairs.len(),
            need: MIN_CALIBRATION_PAIRS,
        });
    }
    let refs: Vec<&str> = pairs.iter().map(|(r, _)| r.as_str()).collect();
    let resps: Vec<&str> = pairs.iter().map(|(_, r)| r.as_str()).collect();
    let ref_vecs = embedder.embed(&refs)?;
    let resp_vecs = embedder.embed(&resps)?;
    let ry = ref_vecs
        .iter()
        .zip(&resp_vecs)
        .map(|(a, b)| similarity(a, b, sim))
        .collect::<Result<Vec<_>>>()?;
    let li: Vec<f64> = resps
        .iter()
        .map(|r| text::length_incentive(&text::tokenize(r)))
        .collect();
    let mut map = fit_calibration(&ry, &li, p_lo, p_hi)?;
    map.embedder_dim = Some(embedder.dim());
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Query-type branching composite.
    R3,
    /// Open-ended formula for every query.
    R3Oe,
    /// Query relevance alone.
    RxOnly,
    LiRp,
    LiOnly,
}

impl RewardVariant {
    pub const ALL: [RewardVariant; 5] = [
        RewardVariant::R3,
        RewardVariant::R3Oe,
        RewardVariant::RxOnly,
        RewardVariant::LiRp,
        RewardVariant::LiOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardVariant::R3 => "r3",
            RewardVariant::R3Oe => "r3_oe",
            RewardVariant::RxOnly => "rx_only",
            RewardVariant::LiRp => "li_rp",
            RewardVariant::LiOnly => "li_only",
        }
    }

    /// Whether scoring a query of type `t` needs the reference and `F`.
    pub fn needs_reference(self, t: QueryType) -> bool {
        self == RewardVariant::R3 && t == QueryType::ClosedEnded
    }

    pub fn uses_rp(self) -> bool {
        matches!(
            self,
            RewardVariant::R3 | RewardVariant::R3Oe | RewardVariant::LiRp
        )
    }
}

impl fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        RewardVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown reward variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "OE")]
    OpenEnded,
    #[serde(rename = "CE")]
    ClosedEnded,
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// Every component behind one reward value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_x: f64,
    pub r_y: Option<f64>,
    pub li: f64,
    pub rp: f64,
    pub f_of_ry: Option<f64>,
    pub branch: Branch,
    #[serde(rename = "final")]
    pub total: f64,
    pub variant: RewardVariant,
}

/// Knobs that sit outside the variant algebra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOptions {
    pub similarity: Similarity,
    /// Optional upper clamp on LI; `None` keeps the formula uncapped.
    pub li_cap: Option<f64>,
    /// When false the repetition penalty is still reported but multiplies as 1.
    pub rp_enabled: bool,
}

impl Default for RewardOptions {
    fn default() -> Self {
        Self {
            similarity: Similarity::InnerProduct,
            li_cap: None,
            rp_enabled: true,
        }
    }
}

/// Raw component values prior to composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub r_x: f64,
    pub r_y: Option<f64>,
    pub li: f64,
    pub rp: f64,
    pub f_of_ry: Option<f64>,
}

fn clamp0(v: f64) -> f64 {
    v.max(0.0)
}

/// Composes a final reward from already-computed components.
///
/// Errors when the R3 closed-ended branch fires without `F(r_y)`.
pub fn compose(
    variant: RewardVariant,
    query_type: QueryType,
    c: Components,
    rp_enabled: bool,
) -> Result<RewardBreakdown> {
    let rp_used = if rp_enabled { c.rp } else { 1.0 };
    let oe = |c: &Components| clamp0(c.r_x) * c.li * rp_used;
    let (branch, total) = match variant {
        RewardVariant::R3 => match query_type {
            QueryType::OpenEnded => (Branch::OpenEnded, oe(&c)),
            QueryType::ClosedEnded => {
                let f = c.f_of_ry.ok_or_else(|| Error::CalibrationRequired {
                    variant: variant.to_string(),
                })?;
                (Branch::ClosedEnded, clamp0(f) * rp_used)
            }
        },
        RewardVariant::R3Oe => (Branch::OpenEnded, oe(&c)),
        RewardVariant::RxOnly => (Branch::NotApplicable, clamp0(c.r_x)),
        RewardVariant::LiRp => (Branch::NotApplicable, c.li * rp_used),
        RewardVariant::LiOnly => (Branch::NotApplicable, c.li),
    };
    if !total.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite reward {total}")));
    }
    Ok(RewardBreakdown {
        r_x: c.r_x,
        r_y: c.r_y,
        li: c.li,
        rp: c.rp,
        f_of_ry: c.f_of_ry,
        branch,
        total,
        variant,
    })
}

/// One scoring request.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInput<'a> {
    pub query: &'a str,
    pub query_type: QueryType,
    pub response: &'a str,
    pub reference: Option<&'a str>,
}

/// Embedder + calibration + options: everything needed to score.
#[derive(Clone)]
pub struct RewardModel {
    embedder: Arc<dyn Embedder>,
    calibration: Option<CalibrationMap>,
    options: RewardOptions,
}

impl fmt::Debug for RewardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardModel")
            .field("dim", &self.embedder.dim())
            .field("calibration", &self.calibration)
            .field("options", &self.options)
            .finish()
    }
}

impl RewardModel {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        calibration: Option<CalibrationMap>,
        options: RewardOptions,
    ) -> Self {
        Self {
            embedder,
            calibration,
            options,
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn embedder_arc(&self) -> Arc<dyn Embedder> {
        Arc::clone(&self.embedder)
    }

    pub fn calibration(&self) -> Option<&CalibrationMap> {
        self.calibration.as_ref()
    }

    pub fn options(&self) -> RewardOptions {
        self.options
    }

    pub fn with_options(mut self, options: RewardOptions) -> Self {
        self.options = options;
        self
    }

    fn check_preconditions(&self, input: &ScoreInput<'_>, variant: RewardVariant) -> Result<()> {
        if variant.needs_reference(input.query_type) {
            if input.reference.is_none() {
                return Err(Error::ReferenceRequired {
                    query: input.query.to_owned(),
                });
            }
            if self.calibration.is_none() {
                return Err(Error::CalibrationRequired {
                    variant: variant.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Scores one response. Multi-turn queries are reduced to the last user turn.
    pub fn score(&self, input: &ScoreInput<'_>, variant: RewardVariant) -> Result<RewardBreakdown> {
        self.check_preconditions(input, variant)?;
        let query = text::last_user_turn(input.query);
        let mut texts = vec![query, input.response];
        if let Some(r) = input.reference {
            texts.push(r);
        }
        let mut vecs = self.embedder.embed(&texts)?.into_iter();
        let (q, resp) = match (vecs.next(), vecs.next()) {
            (Some(q), Some(r)) => (q, r),
            _ => {
                return Err(Error::InvalidInput(
                    "embedder returned too few vectors".into(),
                ))
            }
        };
        let reference = vecs.next();
        let tokens = text::tokenize(input.response);
        self.score_embedded(
            &q,
            reference.as_ref(),
            &resp,
            &tokens,
            input.query_type,
            variant,
        )
    }

    /// Scores with pre-computed embeddings. [`RewardModel::score`] delegates
    /// here, so both routes produce bit-identical results.
    pub fn score_embedded(
        &self,
        query: &EmbeddingVector,
        reference: Option<&EmbeddingVector>,
        response: &EmbeddingVector,
        tokens: &TokenizedText,
        query_type: QueryType,
        variant: RewardVariant,
    ) -> Result<RewardBreakdown> {
        let sim = self.options.similarity;
        let r_x = similarity(query, response, sim)?;
        let r_y = reference
            .map(|r| similarity(r, response, sim))
            .transpose()?;
        let f_of_ry = match (r_y, &self.calibration) {
            (Some(v), Some(map)) => Some(map.apply(v)),
            _ => None,
        };
        if variant.needs_reference(query_type) && r_y.is_none() {
            return Err(Error::ReferenceRequired {
                query: tokens.original.clone(),
            });
        }
        let c = Components {
            r_x,
            r_y,
            li: text::length_incentive_capped(tokens, self.options.li_cap),
            rp: text::repetition_penalty(tokens),
            f_of_ry,
        };
        compose(variant, query_type, c, self.options.rp_enabled)
    }
}

/// Free-function form of [`RewardModel::score`].
pub fn score(
    input: &ScoreInput<'_>,
    variant: RewardVariant,
    embedder: Arc<dyn Embedder>,
    map: Option<&CalibrationMap>,
) -> Result<RewardBreakdown> {
    RewardModel::new(embedder, map.cloned(), RewardOptions::default()).score(input, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;

    fn comps(r_x: f64, li: f64, rp: f64) -> Components {
        Components {
            r_x,
            r_y: None,
            li,
            rp,
            f_of_ry: None,
        }
    }

    #[test]
    fn apply_examples() {
        let map = CalibrationMap::new(0.2, 0.8, 0.0, 4.0).unwrap();
        assert!((map.apply(0.5) - 2.0).abs() <= 1e-12);
        assert_eq!(map.apply(0.9), 4.0);
        assert_eq!(map.apply(0.2), 0.0);
        assert_eq!(map.apply(-3.0), 0.0);
        assert_eq!(map.apply(0.8), 4.0);
    }

    #[test]
    fn fit_uniform_endpoints() {
        let ry: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let li: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
        let map = fit_calibration(&ry, &li, 0.0, 100.0).unwrap();
        assert_eq!((map.src_lo, map.src_hi), (0.0, 1.0));
        assert_eq!((map.dst_lo, map.dst_hi), (0.0, 5.0));
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let flat = vec![0.3; 40];
        let li = vec![1.0; 40];
        let err = fit_calibration(&flat, &li, 5.0, 95.0).unwrap_err();
        assert_eq!(err.code(), "DEGENERATE_CALIBRATION");
        assert!(err.to_string().contains("larger"));

        let small: Vec<f64> = (0..19).map(f64::from).collect();
        assert_eq!(
            fit_calibration(&small, &small, 5.0, 95.0)
                .unwrap_err()
                .code(),
            "CORPUS_TOO_SMALL"
        );
        let ok: Vec<f64> = (0..30).map(f64::from).collect();
        assert_eq!(
            fit_calibration(&ok, &ok, 60.0, 40.0).unwrap_err().code(),
            "INVALID_PERCENTILES"
        );
    }

    #[test]
    fn compose_examples() {
        let b = compose(
            RewardVariant::R3,
            QueryType::OpenEnded,
            comps(0.5, 2.0, 0.9),
            true,
        )
        .unwrap();
        assert_eq!(b.total, 0.9);
        assert_eq!(b.branch, Branch::OpenEnded);

        let ce = Components {
            r_x: 0.1,
            r_y: Some(0.7),
            li: 0.3,
            rp: 0.8,
            f_of_ry: Some(1.5),
        };
        let b = compose(RewardVariant::R3, QueryType::ClosedEnded, ce, true).unwrap();
        assert!((b.total - 1.2).abs() <= 1e-12);
        assert_eq!(b.branch, Branch::ClosedEnded);
    }

    #[test]
    fn negative_relevance_is_clamped() {
        for v in [
            RewardVariant::R3,
            RewardVariant::R3Oe,
            RewardVariant::RxOnly,
        ] {
            let b = compose(v, QueryType::OpenEnded, comps(-0.4, 2.0, 1.0), true).unwrap();
            assert_eq!(b.total, 0.0);
        }
    }

    #[test]
    fn variant_algebra() {
        let c = comps(0.37, 1.3, 0.6);
        let r3 = compose(RewardVariant::R3, QueryType::OpenEnded, c, true).unwrap();
        let r3oe = compose(RewardVariant::R3Oe, QueryType::ClosedEnded, c, true).unwrap();
        assert_eq!(r3.total, r3oe.total);
        let li = compose(RewardVariant::LiOnly, QueryType::ClosedEnded, c, true).unwrap();
        assert_eq!(li.total, 1.3);
        let lirp = compose(RewardVariant::LiRp, QueryType::OpenEnded, c, true).unwrap();
        assert_eq!(lirp.total, 1.3 * 0.6);
        let no_rp = compose(RewardVariant::R3Oe, QueryType::OpenEnded, c, false).unwrap();
        assert_eq!(no_rp.total, 0.37 * 1.3);
        assert_eq!(no_rp.rp, 0.6);
    }

    #[test]
    fn closed_ended_needs_reference_and_calibration() {
        let model = RewardModel::new(
            Arc::new(HashedEmbedder::default()),
            None,
            Default::default(),
        );
        let input = ScoreInput {
            query: "How many moons does Mars have?",
            query_type: QueryType::ClosedEnded,
            response: "Two.",
            reference: None,
        };
        let err = model.score(&input, RewardVariant::R3).unwrap_err();
        assert_eq!(err.code(), "REFERENCE_REQUIRED");
        assert!(err.to_string().contains("Mars"));

        let with_ref = ScoreInput {
            reference: Some("Mars has two moons."),
            ..input
        };
        assert_eq!(
            model
                .score(&with_ref, RewardVariant::R3)
                .unwrap_err()
                .code(),
            "CALIBRATION_REQUIRED"
        );
        // Other variants never need the reference.
        assert!(model.score(&input, RewardVariant::R3Oe).is_ok());
    }

    #[test]
    fn query_copy_is_suppressed_by_length() {
        let model = RewardModel::new(
            Arc::new(HashedEmbedder::default()),
            None,
            Default::default(),
        );
        let q = "please describe the long history of the old mill town";
        assert_eq!(text::words(q).len(), 10);
        let b = model
            .score(
                &ScoreInput {
                    query: q,
                    query_type: QueryType::OpenEnded,
                    response: q,
                    reference: None,
                },
                RewardVariant::R3,
            )
            .unwrap();
        assert!((b.r_x - 1.0).abs() < 1e-6);
        assert_eq!(b.li, 0.1);
        assert!(b.total <= 0.1 + 1e-6);
    }

    #[test]
    fn empty_response_scores_zero() {
        let model = RewardModel::new(
            Arc::new(HashedEmbedder::default()),
            None,
            Default::default(),
        );
        let b = model
            .score(
                &ScoreInput {
                    query: "tell me about rivers",
                    query_type: QueryType::OpenEnded,
                    response: "",
                    reference: None,
                },
                RewardVariant::R3,
            )
            .unwrap();
        assert_eq!(b.r_x, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn calibration_json_round_trip() {
        let mut map = CalibrationMap::new(0.1, 0.9, 0.2, 3.0).unwrap();
        map.embedder_dim = Some(1024);
        let json = serde_json::to_string(&map).unwrap();
        for key in [
            "src_lo",
            "src_hi",
            "dst_lo",
            "dst_hi",
            "percentile_lo",
            "percentile_hi",
            "embedder_dim",
        ] {
            assert!(json.contains(key), "{key} missing from {json}");
        }
        assert_eq!(CalibrationMap::from_json(&json).unwrap(), map);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(
            "rx_only".parse::<RewardVariant>().unwrap(),
            RewardVariant::RxOnly
        );
        assert_eq!(
            "R3-OE".parse::<RewardVariant>().unwrap(),
            RewardVariant::R3Oe
        );
        assert!("r4".parse::<RewardVariant>().is_err());
    }
}
