//! A desk-scale environment for watching a policy exploit a reward.
//!
//! The policy is a table of categorical distributions indexed by
//! (query type, step) over five actions: copy the query, emit an on-topic
//! sentence, emit an off-topic sentence, repeat the previous segment, or stop.
//! Each action appends a segment to the response; the finished response is
//! scored once by the chosen reward variant. Training is clipped-surrogate
//! PPO with a KL penalty to the (uniform) reference policy, a per-task
//! running-mean baseline and no value network.

mod env;
mod experiment;
mod objective;
mod policy;

pub use env::{assemble, rollout, Episode, EpisodeBatch, SandboxEnv, SandboxTask};
pub use experiment::{
    calibrate_on_uniform_rollouts, hacking_stats, run_experiment, ExperimentReport,
    ExperimentSetup, HackingStats, CALIBRATION_SAMPLES_PER_TASK,
};
pub use objective::{
    episode_returns, objective, ppo_step, Adam, KlControl, ObjectiveEval, PpoConfig, PpoTrainer,
    RunningBaseline, StepDiagnostics,
};
pub use policy::{Action, Cell, PolicySnapshot, DEFAULT_MAX_STEPS, NUM_ACTIONS};
