use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actor_critic::{actor_critic_update, AcBatch, ActorCritic, ActorCriticConfig};
use super::buffer::ReplayBuffer;
use super::rollout::{
    collect_grid_episode, collect_maze_episode, endpoint_spread, push_episode, random_grid_episode,
    random_maze_episode, sample_skill, GridTransition, MazeTransition, Rollouts,
};
use super::tabular::{q_learning_update, TabularPolicy, TabularSample};
use crate::analysis::{diayn_reward_from_log_prob, CountTable, Discriminator};
use crate::density::{Cvae, CvaeConfig};
use crate::diffnet::{OptimState, Tensor2};
use crate::env::{
    build_gridworld, build_tree_maze, build_u_maze, occupancy_coverage, tabular_coverage, MazeSpec, Point, TabularMDP,
};
use crate::error::{contract, Result, Sd3Error};
use crate::io::{read_json, write_json};
use crate::parallel::Execution;
use crate::rewards::{r_sd3_checked, RewardBundle, RewardConfig, RewardNormalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvKind {
    Gridworld { side: usize },
    UMaze,
    TreeMaze,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Grid(TabularMDP),
    Maze(MazeSpec),
}

impl EnvKind {
    pub fn build(&self) -> Result<Environment> {
        Ok(match self {
            EnvKind::Gridworld { side } => Environment::Grid(build_gridworld(*side)?),
            EnvKind::UMaze => Environment::Maze(build_u_maze()),
            EnvKind::TreeMaze => Environment::Maze(build_tree_maze()),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Gridworld { .. } => "gridworld",
            EnvKind::UMaze => "u_maze",
            EnvKind::TreeMaze => "tree_maze",
        }
    }
}

impl Environment {
    pub fn default_episode_len(&self) -> usize {
        match self {
            Environment::Grid(m) => m.horizon,
            Environment::Maze(s) => s.episode_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sd3,
    /// Discriminator reward `log q(z|s') + log n`.
    Diayn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabularConfig {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the step budget over which ε decays linearly.
    pub anneal_fraction: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Greedy-rollout exploration rate used for evaluation.
    pub eval_epsilon: f64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            anneal_fraction: 0.5,
            learning_rate: 0.1,
            gamma: 0.9,
            eval_epsilon: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub env: EnvKind,
    pub method: Method,
    pub total_steps: u64,
    /// Defaults to the environment's own horizon.
    pub episode_len: Option<usize>,
    pub n_skills: usize,
    /// Environment steps per density-model update and per policy update.
    pub update_every: usize,
    pub batch_size: usize,
    /// Steps of uniformly random behaviour before learning starts.
    pub warmup_steps: u64,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub rewards: RewardConfig,
    /// `n_skills` and `state_dim` are filled in from the environment.
    pub cvae: CvaeConfig,
    pub actor_critic: ActorCriticConfig,
    pub tabular: TabularConfig,
    /// Grid states are fed to the networks as one-hot vectors (else as
    /// coordinates scaled to `[-1, 1]`).
    pub one_hot_states: bool,
    pub discriminator_hidden: usize,
    pub discriminator_lr: f64,
    /// Count regulariser `κ` of the tabular visitation table.
    pub kappa: f64,
    pub log_every: u64,
    pub coverage_resolution: usize,
    /// Action noise of maze evaluation rollouts.
    pub eval_noise: f64,
    /// Evaluation episodes per skill behind every metrics record.
    pub log_eval_episodes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::UMaze,
            method: Method::Sd3,
            total_steps: 250_000,
            episode_len: None,
            n_skills: 10,
            update_every: 2,
            batch_size: 64,
            warmup_steps: 2_000,
            buffer_capacity: 100_000,
            seed: 0,
            rewards: RewardConfig::default(),
            cvae: CvaeConfig::default(),
            actor_critic: ActorCriticConfig::default(),
            tabular: TabularConfig::default(),
            one_hot_states: true,
            discriminator_hidden: 64,
            discriminator_lr: 1e-3,
            kappa: 1.0,
            log_every: 5_000,
            coverage_resolution: 40,
            eval_noise: 0.1,
            log_eval_episodes: 1,
        }
    }
}

impl PretrainConfig {
    /// Reduced U-maze setting that trains in minutes on one core: a smaller
    /// density model with a wider decoder noise, a smaller actor-critic and
    /// one update per 8 environment steps.
    pub fn u_maze_desk() -> Self {
        Self {
            update_every: 8,
            cvae: CvaeConfig {
                width: 16,
                modules: 2,
                sigma_dec: 0.3,
                ..CvaeConfig::default()
            },
            actor_critic: ActorCriticConfig {
                hidden: 32,
                ..ActorCriticConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Sd3Error::Config(m.to_string()));
        if self.n_skills == 0 {
            return bad("n_skills must be positive");
        }
        if self.update_every == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("update_every, batch_size and buffer_capacity must be positive");
        }
        if self.log_every == 0 || self.log_eval_episodes == 0 {
            return bad("log_every and log_eval_episodes must be positive");
        }
        if self.episode_len == Some(0) {
            return bad("episode_len must be positive");
        }
        if self.coverage_resolution < 2 {
            return bad("coverage_resolution must be at least 2");
        }
        if !(self.kappa > 0.0) || !(self.eval_noise >= 0.0) {
            return bad("kappa must be positive and eval_noise nonnegative");
        }
        if self.discriminator_hidden == 0 || !(self.discriminator_lr >= 0.0) {
            return bad("invalid discriminator settings");
        }
        let t = &self.tabular;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(t.epsilon_start) && unit(t.epsilon_end) && unit(t.eval_epsilon) && unit(t.learning_rate))
            || !(t.anneal_fraction > 0.0)
            || !(0.0..1.0).contains(&t.gamma)
        {
            return bad("invalid tabular settings");
        }
        if let EnvKind::Gridworld { side } = self.env {
            if side < 2 {
                return bad("gridworld side must be at least 2");
            }
        }
        self.rewards.validate()?;
        self.actor_critic.validate()?;
        Ok(())
    }

    /// Validated copy with the environment-derived fields filled in.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let env = self.env.build()?;
        let mut out = self.clone();
        out.episode_len = Some(self.episode_len.unwrap_or_else(|| env.default_episode_len()));
        out.cvae.n_skills = self.n_skills;
        out.cvae.state_dim = feature_dim(&env, self.one_hot_states);
        out.cvae.validate()?;
        Ok(out)
    }
}

pub fn feature_dim(env: &Environment, one_hot: bool) -> usize {
    match env {
        Environment::Grid(m) if one_hot => m.n_states(),
        _ => 2,
    }
}

/// Network input for a grid state.
pub fn grid_features(mdp: &TabularMDP, s: usize, one_hot: bool) -> Vec<f64> {
    if one_hot {
        let mut v = vec![0.0; mdp.n_states()];
        v[s] = 1.0;
        return v;
    }
    match (mdp.coords(s), mdp.grid_side) {
        (Some((x, y)), Some(side)) => {
            let scale = |c: usize| 2.0 * c as f64 / (side - 1) as f64 - 1.0;
            vec![scale(x), scale(y)]
        }
        _ => vec![s as f64, 0.0],
    }
}

pub fn grid_feature_batch(mdp: &TabularMDP, states: &[usize], one_hot: bool) -> Result<Tensor2> {
    let dim = if one_hot { mdp.n_states() } else { 2 };
    let data = states.iter().flat_map(|s| grid_features(mdp, *s, one_hot)).collect();
    Tensor2::from_vec(states.len(), dim, data)
}

pub fn maze_feature_batch(states: &[Point]) -> Result<Tensor2> {
    Tensor2::from_vec(states.len(), 2, states.iter().flatten().copied().collect())
}

/// SD3 rewards of a batch from the current CVAE snapshot, computed on the
/// next states: one all-skill ELBO pass and one encoder pass.
pub fn relabel_batch<R: Rng>(
    cvae: &Cvae,
    next_states: &Tensor2,
    skills: &[usize],
    cfg: &RewardConfig,
    normalizer: &mut RewardNormalizer,
    rng: &mut R,
    exec: Execution,
) -> Result<Vec<RewardBundle>> {
    if next_states.rows() == 0 {
        return Err(contract("relabel_batch needs a nonempty batch"));
    }
    let log_d = cvae.log_density_all(next_states, rng, exec)?;
    let kl = cvae.kl_batch(next_states, skills)?;
    let mut raw = Vec::with_capacity(skills.len());
    for (r, &z) in skills.iter().enumerate() {
        let (sd3, degenerate) = r_sd3_checked(log_d.row(r), z, cfg.lambda)?;
        if degenerate {
            normalizer.degenerate_events += 1;
        }
        raw.push((sd3, kl[r]));
    }
    Ok(normalizer.combine_batch(&raw, cfg))
}

/// Discriminator rewards of a batch, computed on the next states.
pub fn diayn_relabel(disc: &Discriminator, next_states: &Tensor2, skills: &[usize]) -> Result<Vec<f64>> {
    let lp = disc.log_probs(next_states)?;
    skills
        .iter()
        .enumerate()
        .map(|(r, &z)| {
            if z >= disc.n_skills {
                return Err(contract(format!("skill {z} out of range")));
            }
            Ok(diayn_reward_from_log_prob(lp.get(r, z), disc.n_skills))
        })
        .collect()
}

/// Trains `cvae` on uniformly drawn minibatches of `(features, skills)`;
/// returns the mean loss of the last tenth of the steps.
pub fn fit_cvae<R: Rng>(
    cvae: &mut Cvae,
    opt: &mut OptimState,
    features: &Tensor2,
    skills: &[usize],
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    if features.rows() == 0 || features.rows() != skills.len() || batch == 0 {
        return Err(contract("fit_cvae needs matching nonempty data and a positive batch"));
    }
    let tail = (steps / 10).max(1);
    let mut tail_sum = 0.0;
    for i in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..features.rows())).collect();
        let x = gather_rows(features, &idx)?;
        let z: Vec<usize> = idx.iter().map(|&j| skills[j]).collect();
        let loss = cvae.train_step(opt, &x, &z, rng)?;
        if i + tail >= steps {
            tail_sum += loss;
        }
    }
    Ok(tail_sum / tail.min(steps.max(1)) as f64)
}

fn gather_rows(t: &Tensor2, idx: &[usize]) -> Result<Tensor2> {
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor2::from_vec(idx.len(), t.cols(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum Policy {
    Tabular(TabularPolicy),
    ActorCritic(ActorCritic),
}

/// Everything needed to resume analysis of a finished pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub policy: Policy,
    pub cvae: Option<Cvae>,
    pub discriminator: Option<Discriminator>,
    pub normalizer: RewardNormalizer,
    /// Visits `N(s', z)` over the whole experience stream (grid runs).
    pub counts: Option<CountTable>,
    /// Visits `N(s', z)` over the final replay buffer (grid runs).
    pub buffer_counts: Option<CountTable>,
    pub steps: u64,
    pub episodes: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episodes: u64,
    pub updates: u64,
    pub coverage: f64,
    pub mean_r_sd3: Option<f64>,
    pub mean_r_exp: Option<f64>,
    pub mean_r_total: Option<f64>,
    /// Mean training-batch ELBO since the previous record.
    pub elbo: Option<f64>,
    pub endpoint_spread: f64,
    /// Mean TD error (grid) or critic loss (maze) since the previous record.
    pub policy_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Independent random streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_ACT: u64 = 1;
const STREAM_UPDATE: u64 = 2;
const STREAM_EVAL_BASE: u64 = 1 << 32;

#[derive(Default)]
struct Accum {
    sd3: f64,
    exp: f64,
    total: f64,
    rewards: u64,
    elbo: f64,
    elbo_n: u64,
    loss: f64,
    loss_n: u64,
}

impl Accum {
    fn mean(sum: f64, n: u64) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

/// Density side of the loop: the CVAE for SD3, the discriminator for DIAYN.
struct SkillModel {
    cvae: Option<(Cvae, OptimState)>,
    disc: Option<Discriminator>,
    normalizer: RewardNormalizer,
}

impl SkillModel {
    fn new<R: Rng>(cfg: &PretrainConfig, rng: &mut R) -> Result<Self> {
        Ok(match cfg.method {
            Method::Sd3 => {
                let cvae = Cvae::new(cfg.cvae.clone(), rng)?;
                let opt = cvae.new_optimizer();
                Self {
                    cvae: Some((cvae, opt)),
                    disc: None,
                    normalizer: RewardNormalizer::default(),
                }
            }
            Method::Diayn => Self {
                cvae: None,
                disc: Some(Discriminator::new(
                    cfg.cvae.state_dim,
                    cfg.n_skills,
                    cfg.discriminator_hidden,
                    cfg.discriminator_lr,
                    rng,
                )?),
                normalizer: RewardNormalizer::default(),
            },
        })
    }

    /// Relabel with the current snapshot, then update the density model on
    /// the same batch.
    fn rewards_then_update<R: Rng>(
        &mut self,
        cfg: &PretrainConfig,
        next: &Tensor2,
        skills: &[usize],
        acc: &mut Accum,
        rng: &mut R,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        if let Some((cvae, opt)) = &mut self.cvae {
            let bundles = relabel_batch(cvae, next, skills, &cfg.rewards, &mut self.normalizer, rng, exec)?;
            for b in &bundles {
                acc.sd3 += b.r_sd3;
                acc.exp += b.r_exp;
                acc.total += b.r_total;
            }
            acc.rewards += bundles.len() as u64;
            let loss = cvae.train_step(opt, next, skills, rng)?;
            acc.elbo -= loss;
            acc.elbo_n += 1;
            Ok(bundles.into_iter().map(|b| b.r_total).collect())
        } else if let Some(disc) = &mut self.disc {
            let r = diayn_relabel(disc, next, skills)?;
            acc.total += r.iter().sum::<f64>();
            acc.rewards += r.len() as u64;
            disc.train_step(next, skills)?;
            Ok(r)
        } else {
            Err(contract("skill model has neither a CVAE nor a discriminator"))
        }
    }

    fn into_parts(self) -> (Option<Cvae>, Option<Discriminator>, RewardNormalizer) {
        (self.cvae.map(|(c, _)| c), self.disc, self.normalizer)
    }
}

fn epsilon_at(t: &TabularConfig, step: u64, total: u64) -> f64 {
    let horizon = (t.anneal_fraction * total as f64).max(1.0);
    let frac = (step as f64 / horizon).min(1.0);
    t.epsilon_start + (t.epsilon_end - t.epsilon_start) * frac
}

/// Rollouts of every skill used for metrics and reports.
pub fn evaluate_policy<R: Rng>(
    env: &Environment,
    policy: &Policy,
    cfg: &PretrainConfig,
    episodes_per_skill: usize,
    rng: &mut R,
) -> Result<Rollouts> {
    let len = cfg.episode_len.unwrap_or_else(|| env.default_episode_len());
    match (env, policy) {
        (Environment::Grid(mdp), Policy::Tabular(p)) => {
            let mut p = p.clone();
            p.epsilon = cfg.tabular.eval_epsilon;
            let mut out = Vec::new();
            for z in 0..cfg.n_skills {
                for _ in 0..episodes_per_skill {
                    out.push(collect_grid_episode(mdp, &p, z, len, None, rng)?);
                }
            }
            Ok(Rollouts::Grid(out))
        }
        (Environment::Maze(spec), Policy::ActorCritic(ac)) => {
            let mut out = Vec::new();
            for z in 0..cfg.n_skills {
                for _ in 0..episodes_per_skill {
                    out.push(collect_maze_episode(spec, ac, z, len, cfg.eval_noise, None, rng)?);
                }
            }
            Ok(Rollouts::Maze(out))
        }
        _ => Err(contract("policy type does not match the environment")),
    }
}

pub fn rollout_coverage(env: &Environment, rollouts: &Rollouts, resolution: usize) -> Result<f64> {
    match (env, rollouts) {
        (Environment::Grid(mdp), Rollouts::Grid(t)) => Ok(tabular_coverage(mdp, t)),
        (Environment::Maze(spec), Rollouts::Maze(t)) => occupancy_coverage(spec, t, resolution),
        _ => Err(contract("rollouts do not match the environment")),
    }
}

fn metrics_record(
    env: &Environment,
    policy: &Policy,
    cfg: &PretrainConfig,
    step: u64,
    episodes: u64,
    updates: u64,
    acc: &Accum,
) -> Result<MetricsRecord> {
    let mut rng = stream(cfg.seed, STREAM_EVAL_BASE + step);
    let rollouts = evaluate_policy(env, policy, cfg, cfg.log_eval_episodes, &mut rng)?;
    let mdp = match env {
        Environment::Grid(m) => Some(m),
        Environment::Maze(_) => None,
    };
    let sd3 = cfg.method == Method::Sd3;
    Ok(MetricsRecord {
        step,
        episodes,
        updates,
        coverage: rollout_coverage(env, &rollouts, cfg.coverage_resolution)?,
        mean_r_sd3: Accum::mean(acc.sd3, acc.rewards).filter(|_| sd3),
        mean_r_exp: Accum::mean(acc.exp, acc.rewards).filter(|_| sd3),
        mean_r_total: Accum::mean(acc.total, acc.rewards),
        elbo: Accum::mean(acc.elbo, acc.elbo_n),
        endpoint_spread: endpoint_spread(&rollouts.endpoints(cfg.n_skills, mdp)),
        policy_loss: Accum::mean(acc.loss, acc.loss_n),
    })
}

/// Runs the skill-discovery loop: sample a skill, roll out an episode, store
/// it, then per `update_every` steps sample a batch, relabel it with the
/// current density model, update the density model and the policy.
pub fn pretrain(cfg: &PretrainConfig, exec: Execution) -> Result<PretrainResult> {
    let cfg = cfg.resolved()?;
    match cfg.env.build()? {
        Environment::Grid(mdp) => pretrain_grid(&cfg, mdp, exec),
        Environment::Maze(spec) => pretrain_maze(&cfg, spec, exec),
    }
}

struct Schedule {
    step: u64,
    episodes: u64,
    updates: u64,
    pending: usize,
    next_log: u64,
}

impl Schedule {
    fn new(cfg: &PretrainConfig) -> Self {
        Self {
            step: 0,
            episodes: 0,
            updates: 0,
            pending: 0,
            next_log: cfg.log_every,
        }
    }

    /// Records a finished episode; returns the number of updates now due.
    fn advance(&mut self, cfg: &PretrainConfig, len: usize, buffer_len: usize) -> usize {
        self.step += len as u64;
        self.episodes += 1;
        if self.step < cfg.warmup_steps || buffer_len < cfg.batch_size {
            self.pending = 0;
            return 0;
        }
        self.pending += len;
        let due = self.pending / cfg.update_every;
        self.pending %= cfg.update_every;
        due
    }

    fn should_log(&mut self, cfg: &PretrainConfig) -> bool {
        let log = self.step >= self.next_log || self.step == cfg.total_steps;
        if log {
            self.next_log = (self.step / cfg.log_every + 1) * cfg.log_every;
        }
        log
    }
}

fn pretrain_grid(cfg: &PretrainConfig, mdp: TabularMDP, exec: Execution) -> Result<PretrainResult> {
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut act_rng = stream(cfg.seed, STREAM_ACT);
    let mut upd_rng = stream(cfg.seed, STREAM_UPDATE);
    let t = &cfg.tabular;
    let mut policy = TabularPolicy::new(
        mdp.n_states(),
        cfg.n_skills,
        mdp.n_actions(),
        t.epsilon_start,
        t.learning_rate,
        t.gamma,
    )?;
    let mut model = SkillModel::new(cfg, &mut init_rng)?;
    let mut buffer: ReplayBuffer<GridTransition> = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut counts = CountTable::new(mdp.n_states(), cfg.n_skills, cfg.kappa)?;
    let ep_len = cfg.episode_len.expect("resolved");
    let env = Environment::Grid(mdp);
    let Environment::Grid(mdp) = &env else { unreachable!() };

    let mut sched = Schedule::new(cfg);
    let mut acc = Accum::default();
    let mut metrics = Vec::new();
    while sched.step < cfg.total_steps {
        let step = sched.step;
        let at = |e| Sd3Error::at_step(step, e);
        let len = ep_len.min((cfg.total_steps - step) as usize);
        let z = sample_skill(cfg.n_skills, &mut act_rng)?;
        policy.epsilon = epsilon_at(t, step, cfg.total_steps);
        let traj = if step < cfg.warmup_steps {
            random_grid_episode(mdp, z, len, &mut act_rng)
        } else {
            collect_grid_episode(mdp, &policy, z, len, None, &mut act_rng)
        }
        .map_err(at)?;
        push_episode(&mut buffer, &traj);
        for s in &traj.states[1..] {
            counts.record(*s, z)?;
        }
        let due = sched.advance(cfg, len, buffer.len());
        for _ in 0..due {
            let idx = buffer.sample_indices(cfg.batch_size, &mut upd_rng)?;
            let batch: Vec<&GridTransition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let next: Vec<usize> = batch.iter().map(|b| b.next_state).collect();
            let skills: Vec<usize> = batch.iter().map(|b| b.skill).collect();
            let feats = grid_feature_batch(mdp, &next, cfg.one_hot_states)?;
            let rewards = model
                .rewards_then_update(cfg, &feats, &skills, &mut acc, &mut upd_rng, exec)
                .map_err(at)?;
            let samples: Vec<TabularSample> = batch
                .iter()
                .zip(&rewards)
                .map(|(b, r)| TabularSample {
                    state: b.state,
                    skill: b.skill,
                    action: b.action,
                    reward: *r,
                    next_state: b.next_state,
                })
                .collect();
            acc.loss += q_learning_update(&mut policy, &samples).map_err(at)?;
            acc.loss_n += 1;
            if !policy.is_finite() {
                return Err(at(Sd3Error::NonFiniteLoss {
                    iteration: sched.updates,
                    diagnostics: "Q-table became non-finite".into(),
                }));
            }
            sched.updates += 1;
        }
        if sched.should_log(cfg) {
            let wrapped = Policy::Tabular(policy.clone());
            metrics.push(metrics_record(
                &env,
                &wrapped,
                cfg,
                sched.step,
                sched.episodes,
                sched.updates,
                &acc,
            )?);
            acc = Accum::default();
        }
    }

    let mut buffer_counts = CountTable::new(mdp.n_states(), cfg.n_skills, cfg.kappa)?;
    for tr in buffer.items() {
        buffer_counts.record(tr.next_state, tr.skill)?;
    }
    let (cvae, discriminator, normalizer) = model.into_parts();
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            policy: Policy::Tabular(policy),
            cvae,
            discriminator,
            normalizer,
            counts: Some(counts),
            buffer_counts: Some(buffer_counts),
            steps: sched.step,
            episodes: sched.episodes,
        },
        metrics,
    })
}

fn pretrain_maze(cfg: &PretrainConfig, spec: MazeSpec, exec: Execution) -> Result<PretrainResult> {
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut act_rng = stream(cfg.seed, STREAM_ACT);
    let mut upd_rng = stream(cfg.seed, STREAM_UPDATE);
    let mut ac = ActorCritic::new(2, cfg.n_skills, 2, cfg.actor_critic.clone(), &mut init_rng)?;
    let mut model = SkillModel::new(cfg, &mut init_rng)?;
    let mut buffer: ReplayBuffer<MazeTransition> = ReplayBuffer::new(cfg.buffer_capacity)?;
    let ep_len = cfg.episode_len.expect("resolved");
    let env = Environment::Maze(spec);
    let Environment::Maze(spec) = &env else { unreachable!() };

    let mut sched = Schedule::new(cfg);
    let mut acc = Accum::default();
    let mut metrics = Vec::new();
    while sched.step < cfg.total_steps {
        let step = sched.step;
        let at = |e| Sd3Error::at_step(step, e);
        let len = ep_len.min((cfg.total_steps - step) as usize);
        let z = sample_skill(cfg.n_skills, &mut act_rng)?;
        let traj = if step < cfg.warmup_steps {
            Ok(random_maze_episode(spec, z, len, &mut act_rng))
        } else {
            collect_maze_episode(spec, &ac, z, len, cfg.actor_critic.action_noise, None, &mut act_rng)
        }
        .map_err(at)?;
        push_episode(&mut buffer, &traj);
        let due = sched.advance(cfg, len, buffer.len());
        for _ in 0..due {
            let idx = buffer.sample_indices(cfg.batch_size, &mut upd_rng)?;
            let batch: Vec<&MazeTransition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let states: Vec<Point> = batch.iter().map(|b| b.state).collect();
            let next: Vec<Point> = batch.iter().map(|b| b.next_state).collect();
            let actions: Vec<Point> = batch.iter().map(|b| b.action).collect();
            let skills: Vec<usize> = batch.iter().map(|b| b.skill).collect();
            let next_t = maze_feature_batch(&next)?;
            let rewards = model
                .rewards_then_update(cfg, &next_t, &skills, &mut acc, &mut upd_rng, exec)
                .map_err(at)?;
            let ac_batch = AcBatch {
                states: maze_feature_batch(&states)?,
                skills,
                actions: maze_feature_batch(&actions)?,
                rewards,
                next_states: next_t,
            };
            let (critic_loss, _) = actor_critic_update(&mut ac, &ac_batch).map_err(at)?;
            acc.loss += critic_loss;
            acc.loss_n += 1;
            sched.updates += 1;
        }
        if sched.should_log(cfg) {
            let wrapped = Policy::ActorCritic(ac.clone());
            metrics.push(metrics_record(
                &env,
                &wrapped,
                cfg,
                sched.step,
                sched.episodes,
                sched.updates,
                &acc,
            )?);
            acc = Accum::default();
        }
    }

    let (cvae, discriminator, normalizer) = model.into_parts();
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            policy: Policy::ActorCritic(ac),
            cvae,
            discriminator,
            normalizer,
            counts: None,
            buffer_counts: None,
            steps: sched.step,
            episodes: sched.episodes,
        },
        metrics,
    })
}
