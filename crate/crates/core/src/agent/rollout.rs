use rand::Rng;
use serde::{Deserialize, Serialize};

use super::actor_critic::ActorCritic;
use super::buffer::{ReplayBuffer, Transition};
use super::tabular::TabularPolicy;
use crate::env::{maze_step, tabular_step, GridTrajectory, MazeSpec, MazeTrajectory, Point, TabularMDP, Trajectory};
use crate::error::{contract, Result};

pub type GridTransition = Transition<usize, usize>;
pub type MazeTransition = Transition<Point, Point>;

/// Uniform skill id in `0..n`.
pub fn sample_skill<R: Rng>(n: usize, rng: &mut R) -> Result<usize> {
    if n == 0 {
        return Err(contract("cannot sample from an empty skill set"));
    }
    Ok(rng.random_range(0..n))
}

/// Fixed-horizon ε-greedy rollout; every transition is appended to `buffer`.
pub fn collect_grid_episode<R: Rng>(
    mdp: &TabularMDP,
    policy: &TabularPolicy,
    z: usize,
    len: usize,
    buffer: Option<&mut ReplayBuffer<GridTransition>>,
    rng: &mut R,
) -> Result<GridTrajectory> {
    if z >= policy.n_skills {
        return Err(contract(format!("skill {z} out of range {}", policy.n_skills)));
    }
    let mut traj = Trajectory::start(z, mdp.initial_state);
    let mut s = mdp.initial_state;
    for t in 0..len {
        let a = policy.act(s, z, rng);
        let (next, _) = tabular_step(mdp, s, a, t, rng)?;
        traj.push(a, next);
        s = next;
    }
    if let Some(buf) = buffer {
        push_episode(buf, &traj);
    }
    Ok(traj)
}

/// Uniformly random grid actions.
pub fn random_grid_episode<R: Rng>(mdp: &TabularMDP, z: usize, len: usize, rng: &mut R) -> Result<GridTrajectory> {
    let mut traj = Trajectory::start(z, mdp.initial_state);
    let mut s = mdp.initial_state;
    for t in 0..len {
        let a = rng.random_range(0..mdp.n_actions());
        let (next, _) = tabular_step(mdp, s, a, t, rng)?;
        traj.push(a, next);
        s = next;
    }
    Ok(traj)
}

/// Actor rollout with clipped Gaussian action noise of std `noise`.
pub fn collect_maze_episode<R: Rng>(
    spec: &MazeSpec,
    ac: &ActorCritic,
    z: usize,
    len: usize,
    noise: f64,
    buffer: Option<&mut ReplayBuffer<MazeTransition>>,
    rng: &mut R,
) -> Result<MazeTrajectory> {
    if z >= ac.n_skills {
        return Err(contract(format!("skill {z} out of range {}", ac.n_skills)));
    }
    let mut traj = Trajectory::start(z, spec.start);
    let mut s = spec.start;
    for _ in 0..len {
        let a = ac.explore(&s, z, noise, rng)?;
        let a = [a[0], a[1]];
        let next = maze_step(spec, s, a);
        traj.push(a, next);
        s = next;
    }
    if let Some(buf) = buffer {
        push_episode(buf, &traj);
    }
    Ok(traj)
}

/// Uniform actions in `[-1, 1]²`.
pub fn random_maze_episode<R: Rng>(spec: &MazeSpec, z: usize, len: usize, rng: &mut R) -> MazeTrajectory {
    let mut traj = Trajectory::start(z, spec.start);
    let mut s = spec.start;
    for _ in 0..len {
        let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let next = maze_step(spec, s, a);
        traj.push(a, next);
        s = next;
    }
    traj
}

pub fn push_episode<S: Clone, A: Clone>(buffer: &mut ReplayBuffer<Transition<S, A>>, traj: &Trajectory<S, A>) {
    let last = traj.actions.len().saturating_sub(1);
    for (t, a) in traj.actions.iter().enumerate() {
        buffer.push(Transition {
            state: traj.states[t].clone(),
            action: a.clone(),
            next_state: traj.states[t + 1].clone(),
            skill: traj.skill,
            done: t == last,
        });
    }
}

/// Evaluation rollouts of either environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rollouts {
    Grid(Vec<GridTrajectory>),
    Maze(Vec<MazeTrajectory>),
}

impl Rollouts {
    pub fn len(&self) -> usize {
        match self {
            Rollouts::Grid(t) => t.len(),
            Rollouts::Maze(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-skill final states as real vectors; grid states become `(x, y)`.
    pub fn endpoints(&self, n_skills: usize, mdp: Option<&TabularMDP>) -> Vec<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); n_skills];
        match self {
            Rollouts::Grid(ts) => {
                for t in ts {
                    let s = *t.final_state();
                    let p = match mdp.and_then(|m| m.coords(s)) {
                        Some((x, y)) => vec![x as f64, y as f64],
                        None => vec![s as f64],
                    };
                    out[t.skill].push(p);
                }
            }
            Rollouts::Maze(ts) => {
                for t in ts {
                    out[t.skill].push(t.final_state().to_vec());
                }
            }
        }
        out
    }
}

/// Mean pairwise distance between the per-skill mean endpoints of the skills
/// that have at least one endpoint.
pub fn endpoint_spread(endpoints: &[Vec<Vec<f64>>]) -> f64 {
    let means: Vec<Vec<f64>> = endpoints
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let d = g[0].len();
            (0..d)
                .map(|i| g.iter().map(|p| p[i]).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Far-corner goal task: reward `-‖s' - goal‖` per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalTask {
    pub goal: Point,
    pub episode_len: usize,
}

impl GoalTask {
    pub fn reward(&self, next: Point) -> f64 {
        -((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Undiscounted extrinsic return of one trajectory.
    pub fn episode_return(&self, traj: &MazeTrajectory) -> f64 {
        traj.states[1..].iter().map(|s| self.reward(*s)).sum()
    }
}

/// Mean extrinsic return of skill `z` over rollouts totalling `steps` env
/// steps (whole episodes; at least one episode when `steps > 0`).
pub fn mean_goal_return<R: Rng>(
    spec: &MazeSpec,
    ac: &ActorCritic,
    task: &GoalTask,
    z: usize,
    steps: usize,
    noise: f64,
    rng: &mut R,
) -> Result<f64> {
    if task.episode_len == 0 {
        return Err(contract("goal task episode length must be positive"));
    }
    let episodes = (steps / task.episode_len).max(usize::from(steps > 0));
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let traj = collect_maze_episode(spec, ac, z, task.episode_len, noise, None, rng)?;
        total += task.episode_return(&traj);
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ActorCriticConfig;
    use crate::env::{build_gridworld, build_u_maze};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_skill_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_skill(1, &mut rng).unwrap() == 0));
        assert!(sample_skill(0, &mut rng).is_err());
    }

    #[test]
    fn episode_fills_buffer() {
        let mdp = build_gridworld(4).unwrap();
        let policy = TabularPolicy::new(16, 2, 4, 0.3, 0.1, 0.9).unwrap();
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = collect_grid_episode(&mdp, &policy, 1, 37, Some(&mut buf), &mut rng).unwrap();
        assert_eq!(buf.len(), 37);
        assert!(t.is_consistent());
        assert!(buf.items().iter().all(|tr| tr.skill == 1));
        assert!(buf.items()[36].done && !buf.items()[35].done);
    }

    #[test]
    fn greedy_grid_rollout_is_reproducible() {
        let mdp = build_gridworld(4).unwrap();
        let mut policy = TabularPolicy::new(16, 1, 4, 0.0, 0.1, 0.9).unwrap();
        policy.set_q(0, 0, crate::env::RIGHT, 1.0);
        let a = collect_grid_episode(&mdp, &policy, 0, 10, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = collect_grid_episode(&mdp, &policy, 0, 10, None, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_maze_rollout_stays_in_bounds() {
        let spec = build_u_maze();
        let t = random_maze_episode(&spec, 0, 200, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(t.states.len(), 201);
        assert!(t.states.iter().all(|p| spec.bounds.contains(*p)));
        let ac = ActorCritic::new(2, 3, 2, ActorCriticConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = collect_maze_episode(&spec, &ac, 2, 200, 0.5, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(t.states.iter().all(|p| spec.bounds.contains(*p)));
    }

    #[test]
    fn spread_of_points() {
        let e = vec![vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]], vec![]];
        assert_eq!(endpoint_spread(&e), 5.0);
        assert_eq!(endpoint_spread(&[vec![vec![1.0]]]), 0.0);
    }

    #[test]
    fn goal_reward_is_negative_distance() {
        let task = GoalTask {
            goal: [-0.8, 0.8],
            episode_len: 10,
        };
        assert_eq!(task.reward([-0.8, 0.8]), 0.0);
        assert!((task.reward([-0.8, 0.5]) + 0.3).abs() < 1e-12);
    }
}
