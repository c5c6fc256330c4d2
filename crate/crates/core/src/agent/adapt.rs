use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actor_critic::{actor_critic_update, AcBatch, ActorCritic};
use super::buffer::ReplayBuffer;
use super::pretrain::maze_feature_batch;
use super::rollout::{collect_maze_episode, mean_goal_return, push_episode, GoalTask, MazeTransition};
use crate::analysis::{regress_meta_select, RegressMetaReport};
use crate::env::{MazeSpec, Point};
use crate::error::{Result, Sd3Error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub selection: RegressMetaReport,
    pub pre_return: f64,
    pub post_return: Option<f64>,
    pub finetune_steps: usize,
}

/// Regress-meta selection followed by fine-tuning the chosen skill on the
/// goal reward. `eval_episodes` rollouts measure the return before and after.
#[allow(clippy::too_many_arguments)]
pub fn finetune_goal(
    spec: &MazeSpec,
    ac: &mut ActorCritic,
    task: &GoalTask,
    selection_budget: usize,
    finetune_steps: usize,
    eval_episodes: usize,
    eval_noise: f64,
    batch_size: usize,
    seed: u64,
) -> Result<AdaptReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection = regress_meta_select(ac.n_skills, selection_budget, |z, steps| {
        mean_goal_return(spec, ac, task, z, steps, eval_noise, &mut rng)
    })?;
    let z = selection.selected;
    let eval_steps = eval_episodes * task.episode_len;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let pre_return = mean_goal_return(spec, ac, task, z, eval_steps, eval_noise, &mut eval_rng)?;
    if finetune_steps == 0 {
        return Ok(AdaptReport {
            selection,
            pre_return,
            post_return: None,
            finetune_steps,
        });
    }
    let mut buffer: ReplayBuffer<MazeTransition> = ReplayBuffer::new(finetune_steps.max(1))?;
    let mut done = 0usize;
    while done < finetune_steps {
        let len = task.episode_len.min(finetune_steps - done);
        let traj = collect_maze_episode(spec, ac, z, len, ac.config.action_noise, None, &mut rng)?;
        push_episode(&mut buffer, &traj);
        done += len;
        if buffer.len() < batch_size {
            continue;
        }
        // One update per two environment steps.
        for _ in 0..len / 2 {
            let idx = buffer.sample_indices(batch_size, &mut rng)?;
            let pick = |f: &dyn Fn(&MazeTransition) -> Point| -> Vec<Point> {
                idx.iter().map(|&i| f(buffer.get(i))).collect()
            };
            let next = pick(&|t| t.next_state);
            let batch = AcBatch {
                states: maze_feature_batch(&pick(&|t| t.state))?,
                skills: vec![z; batch_size],
                actions: maze_feature_batch(&pick(&|t| t.action))?,
                rewards: next.iter().map(|p| task.reward(*p)).collect(),
                next_states: maze_feature_batch(&next)?,
            };
            actor_critic_update(ac, &batch).map_err(|e| Sd3Error::at_step(done as u64, e))?;
        }
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let post_return = mean_goal_return(spec, ac, task, z, eval_steps, eval_noise, &mut eval_rng)?;
    Ok(AdaptReport {
        selection,
        pre_return,
        post_return: Some(post_return),
        finetune_steps,
    })
}
