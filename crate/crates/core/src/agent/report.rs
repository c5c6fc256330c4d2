use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pretrain::{evaluate_policy, rollout_coverage, Checkpoint, Environment, Method, MetricsRecord};
use super::rollout::Rollouts;
use crate::analysis::skill_discriminability;
use crate::error::Result;

const STREAM_REPORT: u64 = 3;

/// End-of-run skill quality measured on fresh evaluation rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub env: String,
    pub method: Method,
    pub seed: u64,
    pub steps: u64,
    pub episodes_per_skill: usize,
    pub coverage: f64,
    /// Held-out accuracy of a classifier predicting the skill from the final state.
    pub accuracy: f64,
    pub chance: f64,
    pub endpoint_spread: f64,
    pub skill_means: Vec<Vec<f64>>,
    /// Mean ELBO of the last logged update window, if any.
    pub final_elbo: Option<f64>,
}

/// Rolls out every skill `episodes_per_skill` times (at least 5, the number of
/// classifier folds) and scores coverage and discriminability.
pub fn skill_report(
    ckpt: &Checkpoint,
    metrics: &[MetricsRecord],
    episodes_per_skill: usize,
) -> Result<(SkillReport, Rollouts)> {
    let cfg = &ckpt.config;
    let env = cfg.env.build()?;
    let episodes = episodes_per_skill.max(5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_REPORT);
    let rollouts = evaluate_policy(&env, &ckpt.policy, cfg, episodes, &mut rng)?;
    let mdp = match &env {
        Environment::Grid(m) => Some(m),
        Environment::Maze(_) => None,
    };
    let endpoints = rollouts.endpoints(cfg.n_skills, mdp);
    let disc = skill_discriminability(&endpoints, cfg.seed)?;
    let report = SkillReport {
        env: cfg.env.name().to_string(),
        method: cfg.method,
        seed: cfg.seed,
        steps: ckpt.steps,
        episodes_per_skill: episodes,
        coverage: rollout_coverage(&env, &rollouts, cfg.coverage_resolution)?,
        accuracy: disc.accuracy,
        chance: 1.0 / cfg.n_skills as f64,
        endpoint_spread: disc.endpoint_spread,
        skill_means: disc.skill_means,
        final_elbo: metrics.iter().rev().find_map(|m| m.elbo),
    };
    Ok((report, rollouts))
}
