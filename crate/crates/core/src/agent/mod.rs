//! The skill-discovery training loop with a tabular Q-learning backbone for
//! gridworlds and a deterministic actor-critic for the point mazes.

mod actor_critic;
mod adapt;
mod buffer;
mod pretrain;
mod report;
mod rollout;
mod tabular;

pub use actor_critic::{actor_critic_update, AcBatch, ActorCritic, ActorCriticConfig};
pub use adapt::{finetune_goal, AdaptReport};
pub use buffer::{ReplayBuffer, Transition};
pub use pretrain::{
    diayn_relabel, evaluate_policy, feature_dim, fit_cvae, grid_feature_batch, grid_features, maze_feature_batch,
    pretrain, relabel_batch, rollout_coverage, Checkpoint, EnvKind, Environment, Method, MetricsRecord, Policy,
    PretrainConfig, PretrainResult, TabularConfig,
};
pub use report::{skill_report, SkillReport};
pub use rollout::{
    collect_grid_episode, collect_maze_episode, endpoint_spread, mean_goal_return, push_episode, random_grid_episode,
    random_maze_episode, sample_skill, GoalTask, GridTransition, MazeTransition, Rollouts,
};
pub use tabular::{q_learning_update, TabularPolicy, TabularSample};

pub(crate) use tabular::argmax_first;
