use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{rollout, EpisodeBatch, SandboxEnv, SandboxTask};
use super::objective::{PpoConfig, PpoTrainer, StepDiagnostics};
use super::policy::PolicySnapshot;
use crate::embedding::{similarity, Embedder, HashedEmbedder};
use crate::error::Result;
use crate::metrics::{relevant_sentence_ratio, DEFAULT_TAU};
use crate::query_type::QueryType;
use crate::reward::{
    fit_calibration, CalibrationMap, RewardModel, RewardOptions, RewardVariant,
    DEFAULT_PERCENTILE_HI, DEFAULT_PERCENTILE_LO,
};
use crate::text;

/// Uniform-policy samples per task used to fit a calibration map.
pub const CALIBRATION_SAMPLES_PER_TASK: usize = 20;

/// Everything `run_experiment` needs besides the tasks.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub variant: RewardVariant,
    pub cfg: PpoConfig,
    pub options: RewardOptions,
    pub embedder: Arc<dyn Embedder>,
    /// Fitted on uniform-policy rollouts when absent and needed.
    pub calibration: Option<CalibrationMap>,
    /// Threshold for the relevant-sentence proxy.
    pub tau: f64,
}

impl ExperimentSetup {
    pub fn new(variant: RewardVariant, cfg: PpoConfig) -> Self {
        Self {
            variant,
            cfg,
            options: RewardOptions::default(),
            embedder: Arc::new(HashedEmbedder::default()),
            calibration: None,
            tau: DEFAULT_TAU,
        }
    }
}

/// Reward-hacking statistics of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HackingStats {
    pub episodes: usize,
    /// Fraction of responses identical to the query.
    pub copy_rate: f64,
    pub mean_rp: f64,
    pub mean_li: f64,
    /// Mean embedder-threshold relevant-sentence ratio (a proxy, not a judged metric).
    pub relevant_sentence_proxy: f64,
    pub mean_reward: f64,
    pub mean_words: f64,
    pub empty_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: RewardVariant,
    pub rp_enabled: bool,
    pub config: PpoConfig,
    pub calibration: Option<CalibrationMap>,
    pub final_policy: PolicySnapshot,
    pub trajectory: Vec<StepDiagnostics>,
    pub hacking: HackingStats,
}

impl ExperimentReport {
    /// `step,mean_reward,mean_kl,kl_coeff` rows.
    pub fn reward_curve_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,mean_kl,kl_coeff\n");
        for d in &self.trajectory {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                d.step, d.mean_reward, d.mean_kl, d.kl_coeff
            );
        }
        out
    }
}

/// Fits `F` on responses sampled from the uniform policy.
pub fn calibrate_on_uniform_rollouts(
    tasks: &[SandboxTask],
    embedder: Arc<dyn Embedder>,
    options: RewardOptions,
    max_steps: usize,
    seed: u64,
) -> Result<CalibrationMap> {
    let model = RewardModel::new(Arc::clone(&embedder), None, options);
    let env = SandboxEnv::new(tasks.to_vec(), model, RewardVariant::R3Oe)?;
    let ids: Vec<usize> = (0..tasks.len())
        .flat_map(|i| std::iter::repeat_n(i, CALIBRATION_SAMPLES_PER_TASK))
        .collect();
    let batch = rollout(&env, &PolicySnapshot::uniform(max_steps), &ids, seed)?;
    let mut ry = Vec::with_capacity(ids.len());
    let mut li = Vec::with_capacity(ids.len());
    for ep in &batch.episodes {
        let task = &tasks[ep.task_id];
        let vecs = embedder.embed(&[task.reference.as_str(), ep.response.as_str()])?;
        ry.push(similarity(&vecs[0], &vecs[1], options.similarity)?);
        li.push(text::length_incentive(&text::tokenize(&ep.response)));
    }
    let mut map = fit_calibration(&ry, &li, DEFAULT_PERCENTILE_LO, DEFAULT_PERCENTILE_HI)?;
    map.embedder_dim = Some(embedder.dim());
    Ok(map)
}

pub fn hacking_stats(env: &SandboxEnv, batch: &EpisodeBatch, tau: f64) -> Result<HackingStats> {
    let n = batch.episodes.len().max(1) as f64;
    let mut copies = 0usize;
    let mut empty = 0usize;
    let (mut rp, mut li, mut rel, mut reward, mut words) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ep in &batch.episodes {
        let task = &env.tasks()[ep.task_id];
        if ep.response == task.query {
            copies += 1;
        }
        rp += ep.reward.rp;
        li += ep.reward.li;
        reward += ep.reward.total;
        words += text::words(&ep.response).len() as f64;
        if text::split_sentences(&ep.response).is_empty() {
            empty += 1;
        } else {
            rel += relevant_sentence_ratio(&task.query, &ep.response, env.model().embedder(), tau)?
                .proxy_ratio;
        }
    }
    Ok(HackingStats {
        episodes: batch.episodes.len(),
        copy_rate: copies as f64 / n,
        mean_rp: rp / n,
        mean_li: li / n,
        relevant_sentence_proxy: rel / n,
        mean_reward: reward / n,
        mean_words: words / n,
        empty_rate: empty as f64 / n,
    })
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains a policy from uniform initialization against `setup.variant` and
/// reports its trajectory and reward-hacking statistics.
pub fn run_experiment(tasks: &[SandboxTask], setup: &ExperimentSetup) -> Result<ExperimentReport> {
    let cfg = &setup.cfg;
    cfg.validate()?;
    let needs_map = setup.variant == RewardVariant::R3
        && tasks.iter().any(|t| t.query_type == QueryType::ClosedEnded);
    let calibration = match (&setup.calibration, needs_map) {
        (Some(map), _) => Some(map.clone()),
        (None, true) => Some(calibrate_on_uniform_rollouts(
            tasks,
            Arc::clone(&setup.embedder),
            setup.options,
            cfg.max_steps,
            mix(cfg.seed, 0xca11),
        )?),
        (None, false) => None,
    };
    let model = RewardModel::new(
        Arc::clone(&setup.embedder),
        calibration.clone(),
        setup.options,
    );
    let env = SandboxEnv::new(tasks.to_vec(), model, setup.variant)?;

    let uniform = PolicySnapshot::uniform(cfg.max_steps);
    let mut trainer = PpoTrainer::new(cfg.clone(), uniform.clone(), uniform)?;
    let mut task_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7a5c));
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids: Vec<usize> = (0..cfg.batch_episodes)
            .map(|_| task_rng.gen_range(0..tasks.len()))
            .collect();
        let batch = rollout(&env, &trainer.policy, &ids, mix(cfg.seed, step as u64 + 1))?;
        let diag = trainer.update(&batch)?;
        if step % 100 == 0 {
            tracing::debug!(
                step,
                reward = diag.mean_reward,
                kl = diag.mean_kl,
                "ppo step"
            );
        }
        trajectory.push(diag);
    }

    let eval_ids: Vec<usize> = (0..cfg.eval_episodes).map(|i| i % tasks.len()).collect();
    let eval = rollout(&env, &trainer.policy, &eval_ids, mix(cfg.seed, 0xe7a1))?;
    let hacking = hacking_stats(&env, &eval, setup.tau)?;
    Ok(ExperimentReport {
        variant: setup.variant,
        rp_enabled: setup.options.rp_enabled,
        config: cfg.clone(),
        calibration,
        final_policy: trainer.policy,
        trajectory,
        hacking,
    })
}
