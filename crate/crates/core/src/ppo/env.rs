use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{Action, Cell, PolicySnapshot, NUM_ACTIONS};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::query_type::QueryType;
use crate::reward::{RewardBreakdown, RewardModel, RewardVariant, ScoreInput};
use crate::text;

/// One prompt of the sandbox with the sentence banks its actions draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxTask {
    pub query: String,
    pub query_type: QueryType,
    pub relevant_bank: Vec<String>,
    pub irrelevant_bank: Vec<String>,
    pub reference: String,
}

impl SandboxTask {
    pub fn validate(&self) -> Result<()> {
        if self.relevant_bank.is_empty() || self.irrelevant_bank.is_empty() {
            return Err(Error::InvalidInput(format!(
                "task {:?}: sentence banks must be nonempty",
                self.query
            )));
        }
        let query_words: HashSet<String> = text::words(&self.query).into_iter().collect();
        for s in &self.relevant_bank {
            if !text::words(s).iter().any(|w| query_words.contains(w)) {
                return Err(Error::InvalidInput(format!(
                    "task {:?}: relevant sentence {s:?} shares no word with the query",
                    self.query
                )));
            }
        }
        for s in &self.irrelevant_bank {
            if text::words(s).iter().any(|w| query_words.contains(w)) {
                return Err(Error::InvalidInput(format!(
                    "task {:?}: irrelevant sentence {s:?} shares a word with the query",
                    self.query
                )));
            }
        }
        Ok(())
    }
}

/// Deterministically assembles a response from an action sequence.
///
/// Stops at the first [`Action::Stop`]; segments are joined with single spaces.
pub fn assemble(task: &SandboxTask, actions: &[Action]) -> String {
    let mut segments: Vec<&str> = Vec::new();
    let mut last: Option<&str> = None;
    let (mut rel, mut irr) = (0usize, 0usize);
    for &a in actions {
        let seg = match a {
            Action::Stop => break,
            Action::CopyQuery => Some(task.query.as_str()),
            Action::EmitRelevant => {
                let s = &task.relevant_bank[rel % task.relevant_bank.len()];
                rel += 1;
                Some(s.as_str())
            }
            Action::EmitIrrelevant => {
                let s = &task.irrelevant_bank[irr % task.irrelevant_bank.len()];
                irr += 1;
                Some(s.as_str())
            }
            Action::RepeatLast => last,
        };
        if let Some(s) = seg {
            segments.push(s);
            last = Some(s);
        }
    }
    segments.join(" ")
}

/// Tasks plus a reward model, with the task-side embeddings cached.
#[derive(Debug, Clone)]
pub struct SandboxEnv {
    tasks: Vec<SandboxTask>,
    model: RewardModel,
    variant: RewardVariant,
    query_vecs: Vec<EmbeddingVector>,
    reference_vecs: Vec<EmbeddingVector>,
}

impl SandboxEnv {
    pub fn new(
        tasks: Vec<SandboxTask>,
        model: RewardModel,
        variant: RewardVariant,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidInput(
                "sandbox needs at least one task".into(),
            ));
        }
        for t in &tasks {
            t.validate()?;
        }
        if variant == RewardVariant::R3
            && tasks.iter().any(|t| t.query_type == QueryType::ClosedEnded)
            && model.calibration().is_none()
        {
            return Err(Error::CalibrationRequired {
                variant: variant.to_string(),
            });
        }
        let queries: Vec<&str> = tasks
            .iter()
            .map(|t| text::last_user_turn(&t.query))
            .collect();
        let refs: Vec<&str> = tasks.iter().map(|t| t.reference.as_str()).collect();
        let query_vecs = model.embedder().embed(&queries)?;
        let reference_vecs = model.embedder().embed(&refs)?;
        Ok(Self {
            tasks,
            model,
            variant,
            query_vecs,
            reference_vecs,
        })
    }

    pub fn tasks(&self) -> &[SandboxTask] {
        &self.tasks
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn variant(&self) -> RewardVariant {
        self.variant
    }

    /// Scores a response for task `id` (same arithmetic as [`RewardModel::score`]).
    pub fn score(&self, id: usize, response: &str) -> Result<RewardBreakdown> {
        let task = &self.tasks[id];
        let resp = self.model.embedder().embed_one(response)?;
        let tokens = text::tokenize(response);
        self.model.score_embedded(
            &self.query_vecs[id],
            Some(&self.reference_vecs[id]),
            &resp,
            &tokens,
            task.query_type,
            self.variant,
        )
    }

    /// Library-level scoring from raw text, for cross-checks.
    pub fn score_from_text(&self, id: usize, response: &str) -> Result<RewardBreakdown> {
        let task = &self.tasks[id];
        self.model.score(
            &ScoreInput {
                query: &task.query,
                query_type: task.query_type,
                response,
                reference: Some(&task.reference),
            },
            self.variant,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: usize,
    pub query_type: QueryType,
    pub actions: Vec<Action>,
    pub response: String,
    pub reward: RewardBreakdown,
    /// Log-probability of each taken action under the sampling policy.
    pub log_probs: Vec<f64>,
}

impl Episode {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.actions.len()).map(move |step| Cell {
            query_type: self.query_type,
            step,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
}

impl EpisodeBatch {
    pub fn mean_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.reward.total).sum::<f64>() / self.episodes.len() as f64
    }
}

fn sample_index(probs: &[f64; NUM_ACTIONS], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    NUM_ACTIONS - 1
}

/// Samples one episode per entry of `task_ids`.
///
/// Episode `i` draws from its own stream seeded with `seed ^ i`, so results do
/// not depend on evaluation order.
pub fn rollout(
    env: &SandboxEnv,
    policy: &PolicySnapshot,
    task_ids: &[usize],
    seed: u64,
) -> Result<EpisodeBatch> {
    policy.validate()?;
    let mut episodes = Vec::with_capacity(task_ids.len());
    for (i, &task_id) in task_ids.iter().enumerate() {
        let task = env
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::InvalidInput(format!("task id {task_id} out of range")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let mut actions = Vec::with_capacity(policy.max_steps);
        let mut log_probs = Vec::with_capacity(policy.max_steps);
        for step in 0..policy.max_steps {
            let cell = Cell {
                query_type: task.query_type,
                step,
            };
            let probs = policy.probs(cell);
            let a = sample_index(&probs, rng.gen::<f64>());
            log_probs.push(policy.log_probs(cell)[a]);
            let action = Action::from_index(a);
            actions.push(action);
            if action == Action::Stop {
                break;
            }
        }
        let response = assemble(task, &actions);
        let reward = env.score(task_id, &response)?;
        episodes.push(Episode {
            task_id,
            query_type: task.query_type,
            actions,
            response,
            reward,
            log_probs,
        });
    }
    Ok(EpisodeBatch { episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;
    use crate::reward::RewardOptions;
    use std::sync::Arc;

    fn task() -> SandboxTask {
        SandboxTask {
            query: "Please tell me about the Morrow canal.".into(),
            query_type: QueryType::OpenEnded,
            relevant_bank: vec![
                "The Morrow canal links two lakes.".into(),
                "The Morrow canal opened in spring.".into(),
            ],
            irrelevant_bank: vec!["Copper kettles whistle loudly.".into()],
            reference: "The Morrow canal links two lakes.".into(),
        }
    }

    fn env(variant: RewardVariant) -> SandboxEnv {
        let model = RewardModel::new(
            Arc::new(HashedEmbedder::default()),
            None,
            RewardOptions::default(),
        );
        SandboxEnv::new(vec![task()], model, variant).unwrap()
    }

    #[test]
    fn assembly_rules() {
        use Action::*;
        let t = task();
        assert_eq!(assemble(&t, &[Stop, CopyQuery]), "");
        assert_eq!(assemble(&t, &[RepeatLast, CopyQuery, Stop]), t.query);
        assert_eq!(
            assemble(&t, &[EmitRelevant, EmitRelevant, EmitRelevant]),
            format!(
                "{} {} {}",
                t.relevant_bank[0], t.relevant_bank[1], t.relevant_bank[0]
            )
        );
        assert_eq!(
            assemble(&t, &[EmitIrrelevant, RepeatLast]),
            format!("{0} {0}", t.irrelevant_bank[0])
        );
    }

    #[test]
    fn stop_first_gives_empty_zero_reward() {
        let env = env(RewardVariant::R3);
        let p = PolicySnapshot::scripted(8, &[Action::Stop], 50.0);
        let batch = rollout(&env, &p, &[0; 16], 3).unwrap();
        for e in &batch.episodes {
            assert_eq!(e.response, "");
            assert_eq!(e.reward.total, 0.0);
        }
    }

    #[test]
    fn copy_then_stop_reproduces_query() {
        let env = env(RewardVariant::RxOnly);
        let p = PolicySnapshot::scripted(8, &[Action::CopyQuery, Action::Stop], 50.0);
        let batch = rollout(&env, &p, &[0; 16], 3).unwrap();
        assert!(batch
            .episodes
            .iter()
            .all(|e| e.response == env.tasks()[0].query));
    }

    #[test]
    fn seeded_rollouts_are_reproducible() {
        let env = env(RewardVariant::R3);
        let p = PolicySnapshot::uniform(8);
        let a = rollout(&env, &p, &[0; 32], 99).unwrap();
        let b = rollout(&env, &p, &[0; 32], 99).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = rollout(&env, &p, &[0; 32], 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn task_validation() {
        let mut bad = task();
        bad.irrelevant_bank.push("The kettle".into());
        assert!(bad.validate().is_err());
        let mut bad = task();
        bad.relevant_bank.clear();
        assert!(bad.validate().is_err());
    }
}
