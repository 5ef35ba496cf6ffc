//! Clipped-surrogate PPO with an analytic KL penalty to a frozen reference.
//!
//! For a batch of `N` episodes sampled from `π_old`, the maximized objective is
//!
//! ```text
//! J(θ) = 1/N Σ_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i)
//!        - β/N Σ_i Σ_{t < len_i} KL(π_θ(·|type_i, t) || π_ref(·|type_i, t))
//! ```
//!
//! with `ρ_i = exp(Σ_t log π_θ(a_t) - Σ_t log π_old(a_t))`. The KL term is
//! exact per visited cell; [`objective`] returns `J` and its gradient with
//! respect to every logit.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::env::EpisodeBatch;
use super::policy::{kl_from_logp, PolicySnapshot, DEFAULT_MAX_STEPS, NUM_ACTIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlControl {
    Fixed,
    /// Proportional controller toward a target per-episode KL.
    Adaptive {
        target: f64,
        horizon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub kl_control: KlControl,
    pub ppo_epochs: usize,
    pub gamma: f64,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub max_steps: usize,
    /// Decay of the per-task running-mean reward baseline.
    pub baseline_decay: f64,
    /// Episodes sampled from the final policy for the report.
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            kl_coeff: 0.2,
            kl_control: KlControl::Fixed,
            ppo_epochs: 4,
            gamma: 1.0,
            batch_episodes: 64,
            learning_rate: 0.05,
            steps: 500,
            seed: 1,
            max_steps: DEFAULT_MAX_STEPS,
            baseline_decay: 0.9,
            eval_episodes: 1000,
        }
    }
}

impl PpoConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.clip_ratio > 0.0) {
            return bad("clip_ratio", "must be > 0");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff", "must be >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs", "must be positive");
        }
        if self.batch_episodes == 0 {
            return bad("batch_episodes", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay", "must lie in [0, 1)");
        }
        if let KlControl::Adaptive { target, horizon } = self.kl_control {
            if !(target > 0.0) || !(horizon > 0.0) {
                return bad("kl_control", "adaptive target and horizon must be > 0");
            }
        }
        Ok(())
    }
}

/// Objective value, its parts and its gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub surrogate: f64,
    /// Mean over episodes of the summed per-step KL.
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad: Vec<f64>,
}

/// Evaluates `J(θ)` and `∂J/∂θ` for `policy` on a fixed batch.
///
/// `old_log_probs[i]` is the total log-probability of episode `i` under the
/// sampling policy and `advantages[i]` its advantage.
pub fn objective(
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &EpisodeBatch,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_ratio: f64,
    kl_coeff: f64,
) -> ObjectiveEval {
    let n = batch.episodes.len();
    let mut grad = vec![0.0; policy.logits.len()];
    if n == 0 {
        return ObjectiveEval {
            value: 0.0,
            surrogate: 0.0,
            kl: 0.0,
            clip_fraction: 0.0,
            grad,
        };
    }
    let inv_n = 1.0 / n as f64;
    let cells = policy.num_cells();
    let mut logp_cache: Vec<[f64; NUM_ACTIONS]> = Vec::with_capacity(cells);
    let mut ref_cache: Vec<[f64; NUM_ACTIONS]> = Vec::with_capacity(cells);
    for c in policy.cells() {
        logp_cache.push(policy.log_probs(c));
        ref_cache.push(reference.log_probs(c));
    }
    let mut visits = vec![0usize; cells];

    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    for ((ep, &old), &adv) in batch.episodes.iter().zip(old_log_probs).zip(advantages) {
        let mut logp = 0.0;
        for (cell, a) in ep.cells().zip(&ep.actions) {
            let ci = policy.cell_index(cell);
            logp += logp_cache[ci][a.index()];
            visits[ci] += 1;
        }
        let ratio = (logp - old).exp();
        let clamped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio);
        surrogate += (ratio * adv).min(clamped * adv);
        let active = if adv >= 0.0 {
            ratio < 1.0 + clip_ratio
        } else {
            ratio > 1.0 - clip_ratio
        };
        if !active {
            clipped += 1;
            continue;
        }
        // d(ratio * A)/d logit = A * ratio * (1[k = a] - p_k), summed over steps.
        let coef = adv * ratio * inv_n;
        for (cell, a) in ep.cells().zip(&ep.actions) {
            let ci = policy.cell_index(cell);
            let lp = &logp_cache[ci];
            let g = &mut grad[ci * NUM_ACTIONS..(ci + 1) * NUM_ACTIONS];
            for k in 0..NUM_ACTIONS {
                let ind = if k == a.index() { 1.0 } else { 0.0 };
                g[k] += coef * (ind - lp[k].exp());
            }
        }
    }
    surrogate *= inv_n;

    let mut kl_total = 0.0;
    for ci in 0..cells {
        if visits[ci] == 0 {
            continue;
        }
        let lp = &logp_cache[ci];
        let lq = &ref_cache[ci];
        let kl = kl_from_logp(lp, lq);
        let w = visits[ci] as f64 * inv_n;
        kl_total += w * kl;
        // dKL(p||q)/dz_j = p_j (log p_j - log q_j - KL)
        let g = &mut grad[ci * NUM_ACTIONS..(ci + 1) * NUM_ACTIONS];
        for j in 0..NUM_ACTIONS {
            let p = lp[j].exp();
            g[j] -= kl_coeff * w * p * (lp[j] - lq[j] - kl);
        }
    }

    ObjectiveEval {
        value: surrogate - kl_coeff * kl_total,
        surrogate,
        kl: kl_total,
        clip_fraction: clipped as f64 * inv_n,
        grad,
    }
}

/// Adam, for gradient ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, size: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mean_reward: f64,
    /// KL to the reference before the update.
    pub mean_kl: f64,
    /// Negated clipped surrogate after the last epoch.
    pub surrogate_loss: f64,
    pub clip_fraction: f64,
    pub kl_coeff: f64,
}

/// Discounted terminal return of each episode.
pub fn episode_returns(batch: &EpisodeBatch, gamma: f64) -> Vec<f64> {
    batch
        .episodes
        .iter()
        .map(|e| {
            let delay = e.actions.len().saturating_sub(1) as i32;
            e.reward.total * gamma.powi(delay)
        })
        .collect()
}

/// Runs `cfg.ppo_epochs` full-batch ascent epochs from `policy`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_step(
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &EpisodeBatch,
    advantages: &[f64],
    cfg: &PpoConfig,
    kl_coeff: f64,
    optimizer: &mut Adam,
    step: usize,
) -> Result<(PolicySnapshot, StepDiagnostics)> {
    if advantages.len() != batch.episodes.len() {
        return Err(Error::InvalidInput(format!(
            "{} advantages for {} episodes",
            advantages.len(),
            batch.episodes.len()
        )));
    }
    let old: Vec<f64> = batch.episodes.iter().map(|e| e.total_log_prob()).collect();
    let mut current = policy.clone();
    let mut first_kl = None;
    let mut last = None;
    for _ in 0..cfg.ppo_epochs {
        let eval = objective(
            &current,
            reference,
            batch,
            &old,
            advantages,
            cfg.clip_ratio,
            kl_coeff,
        );
        if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                loss: -eval.surrogate,
                kl: eval.kl,
            });
        }
        first_kl.get_or_insert(eval.kl);
        optimizer.ascend(&mut current.logits, &eval.grad);
        last = Some(eval);
    }
    let last = last.expect("ppo_epochs > 0");
    if current.logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            step,
            loss: -last.surrogate,
            kl: last.kl,
        });
    }
    Ok((
        current,
        StepDiagnostics {
            step,
            mean_reward: batch.mean_reward(),
            mean_kl: first_kl.unwrap_or(0.0),
            surrogate_loss: -last.surrogate,
            clip_fraction: last.clip_fraction,
            kl_coeff,
        },
    ))
}

/// Per-task exponential moving average of returns.
#[derive(Debug, Clone, Default)]
pub struct RunningBaseline {
    decay: f64,
    values: HashMap<usize, f64>,
}

impl RunningBaseline {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            values: HashMap::new(),
        }
    }

    pub fn get(&self, task: usize) -> Option<f64> {
        self.values.get(&task).copied()
    }

    /// Advantages against the current baseline, then folds the batch in.
    /// Tasks seen for the first time are baselined on their batch mean.
    pub fn advantages(&mut self, batch: &EpisodeBatch, returns: &[f64]) -> Vec<f64> {
        let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
        for (e, &r) in batch.episodes.iter().zip(returns) {
            let s = sums.entry(e.task_id).or_insert((0.0, 0));
            s.0 += r;
            s.1 += 1;
        }
        let adv = batch
            .episodes
            .iter()
            .zip(returns)
            .map(|(e, &r)| {
                let b = self.get(e.task_id).unwrap_or_else(|| {
                    let (s, c) = sums[&e.task_id];
                    s / c as f64
                });
                r - b
            })
            .collect();
        let mut keys: Vec<_> = sums.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let (s, c) = sums[&k];
            let mean = s / c as f64;
            let v = self.values.entry(k).or_insert(mean);
            *v = self.decay * *v + (1.0 - self.decay) * mean;
        }
        adv
    }
}

/// Stateful trainer: online policy, frozen reference, optimizer and baseline.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    pub cfg: PpoConfig,
    pub policy: PolicySnapshot,
    pub reference: PolicySnapshot,
    pub kl_coeff: f64,
    optimizer: Adam,
    baseline: RunningBaseline,
    steps_done: usize,
}

impl PpoTrainer {
    pub fn new(cfg: PpoConfig, policy: PolicySnapshot, reference: PolicySnapshot) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        reference.validate()?;
        if policy.max_steps != reference.max_steps {
            return Err(Error::InvalidInput(
                "policy and reference have different horizons".into(),
            ));
        }
        let optimizer = Adam::new(cfg.learning_rate, policy.logits.len());
        Ok(Self {
            kl_coeff: cfg.kl_coeff,
            baseline: RunningBaseline::new(cfg.baseline_decay),
            cfg,
            policy,
            reference,
            optimizer,
            steps_done: 0,
        })
    }

    pub fn update(&mut self, batch: &EpisodeBatch) -> Result<StepDiagnostics> {
        let returns = episode_returns(batch, self.cfg.gamma);
        let advantages = self.baseline.advantages(batch, &returns);
        let (next, diag) = ppo_step(
            &self.policy,
            &self.reference,
            batch,
            &advantages,
            &self.cfg,
            self.kl_coeff,
            &mut self.optimizer,
            self.steps_done,
        )?;
        self.policy = next;
        self.steps_done += 1;
        if let KlControl::Adaptive { target, horizon } = self.cfg.kl_control {
            let err = (diag.mean_kl / target - 1.0).clamp(-0.2, 0.2);
            self.kl_coeff *= 1.0 + err * batch.episodes.len() as f64 / horizon;
        }
        Ok(diag)
    }
}
