use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query_type::QueryType;

pub const NUM_ACTIONS: usize = 5;
pub const NUM_TYPES: usize = 2;
pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    /// Append the query text verbatim.
    CopyQuery,
    /// Append the next unused on-topic sentence.
    EmitRelevant,
    /// Append the next unused off-topic sentence.
    EmitIrrelevant,
    /// Re-append the previous segment.
    RepeatLast,
    Stop,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::CopyQuery,
        Action::EmitRelevant,
        Action::EmitIrrelevant,
        Action::RepeatLast,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

/// Cell address: one categorical distribution per (query type, step).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub query_type: QueryType,
    pub step: usize,
}

/// Logit table over (query type, step, action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub max_steps: usize,
    /// Flattened `[type][step][action]`.
    pub logits: Vec<f64>,
}

pub(crate) fn softmax(logits: &[f64]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_ACTIONS];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub(crate) fn log_softmax(logits: &[f64]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let mut out = [0.0; NUM_ACTIONS];
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
    out
}

/// `KL(p || q)` from log-probabilities.
pub(crate) fn kl_from_logp(logp: &[f64; NUM_ACTIONS], logq: &[f64; NUM_ACTIONS]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

impl PolicySnapshot {
    /// All-zero logits, i.e. uniform over actions at every cell.
    pub fn uniform(max_steps: usize) -> Self {
        Self {
            max_steps,
            logits: vec![0.0; NUM_TYPES * max_steps * NUM_ACTIONS],
        }
    }

    /// A policy that deterministically (up to `strength`) plays `script[t]` at step `t`
    /// for both query types; later steps stay uniform.
    pub fn scripted(max_steps: usize, script: &[Action], strength: f64) -> Self {
        let mut p = Self::uniform(max_steps);
        for t in QueryType::ALL {
            for (step, a) in script.iter().enumerate().take(max_steps) {
                let off = p.offset(Cell {
                    query_type: t,
                    step,
                });
                p.logits[off + a.index()] = strength;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidInput("policy needs at least one step".into()));
        }
        if self.logits.len() != NUM_TYPES * self.max_steps * NUM_ACTIONS {
            return Err(Error::InvalidInput(format!(
                "policy table has {} entries, expected {}",
                self.logits.len(),
                NUM_TYPES * self.max_steps * NUM_ACTIONS
            )));
        }
        if self.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("policy has non-finite logits".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        NUM_TYPES * self.max_steps
    }

    pub fn cell_index(&self, cell: Cell) -> usize {
        cell.query_type.index() * self.max_steps + cell.step
    }

    pub(crate) fn offset(&self, cell: Cell) -> usize {
        self.cell_index(cell) * NUM_ACTIONS
    }

    pub fn cell_logits(&self, cell: Cell) -> &[f64] {
        let off = self.offset(cell);
        &self.logits[off..off + NUM_ACTIONS]
    }

    pub fn probs(&self, cell: Cell) -> [f64; NUM_ACTIONS] {
        softmax(self.cell_logits(cell))
    }

    pub fn log_probs(&self, cell: Cell) -> [f64; NUM_ACTIONS] {
        log_softmax(self.cell_logits(cell))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        QueryType::ALL.into_iter().flat_map(move |t| {
            (0..self.max_steps).map(move |step| Cell {
                query_type: t,
                step,
            })
        })
    }

    /// `KL(self || other)` at one cell.
    pub fn kl_at(&self, other: &PolicySnapshot, cell: Cell) -> f64 {
        kl_from_logp(&self.log_probs(cell), &other.log_probs(cell))
    }

    /// Largest total-variation distance to `other` over all cells.
    pub fn max_total_variation(&self, other: &PolicySnapshot) -> f64 {
        self.cells()
            .map(|c| {
                let p = self.probs(c);
                let q = other.probs(c);
                0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn argmax(&self, cell: Cell) -> Action {
        let l = self.cell_logits(cell);
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if l[i] > l[best] {
                best = i;
            }
        }
        Action::from_index(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_policy_with_itself_is_zero() {
        let mut p = PolicySnapshot::uniform(3);
        for (i, l) in p.logits.iter_mut().enumerate() {
            *l = ((i * 37) % 11) as f64 * 0.3 - 1.0;
        }
        for c in p.cells() {
            assert_eq!(p.kl_at(&p, c), 0.0);
        }
        assert_eq!(p.max_total_variation(&p), 0.0);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax(&[1.0, 2.0, 3.0, -4.0, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let lp = log_softmax(&[1.0, 2.0, 3.0, -4.0, 0.5]);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scripted_policy_prefers_script() {
        let p = PolicySnapshot::scripted(4, &[Action::CopyQuery, Action::Stop], 30.0);
        let c0 = Cell {
            query_type: QueryType::ClosedEnded,
            step: 0,
        };
        assert_eq!(p.argmax(c0), Action::CopyQuery);
        assert!(p.probs(c0)[0] > 1.0 - 1e-9);
        p.validate().unwrap();
    }
}
