use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Skill-conditioned Q-table `Q[s][z][a]` with ε-greedy exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_skills: usize,
    pub n_actions: usize,
    q: Vec<f64>,
    pub epsilon: f64,
    pub lr: f64,
    pub gamma: f64,
}

/// One relabelled tabular update sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularSample {
    pub state: usize,
    pub skill: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_skills: usize, n_actions: usize, epsilon: f64, lr: f64, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_skills == 0 || n_actions == 0 {
            return Err(contract("tabular policy dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&epsilon) || !(0.0..=1.0).contains(&lr) || !(0.0..1.0).contains(&gamma) {
            return Err(contract("epsilon and lr must lie in [0, 1], gamma in [0, 1)"));
        }
        Ok(Self {
            n_states,
            n_skills,
            n_actions,
            q: vec![0.0; n_states * n_skills * n_actions],
            epsilon,
            lr,
            gamma,
        })
    }

    fn idx(&self, s: usize, z: usize) -> usize {
        (s * self.n_skills + z) * self.n_actions
    }

    pub fn q_values(&self, s: usize, z: usize) -> &[f64] {
        let i = self.idx(s, z);
        &self.q[i..i + self.n_actions]
    }

    pub fn q(&self, s: usize, z: usize, a: usize) -> f64 {
        self.q[self.idx(s, z) + a]
    }

    pub fn set_q(&mut self, s: usize, z: usize, a: usize, v: f64) {
        let i = self.idx(s, z) + a;
        self.q[i] = v;
    }

    /// Greedy action; ties go to the lowest index.
    pub fn greedy(&self, s: usize, z: usize) -> usize {
        argmax_first(self.q_values(s, z))
    }

    pub fn max_q(&self, s: usize, z: usize) -> f64 {
        self.q_values(s, z).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn act<R: Rng>(&self, s: usize, z: usize, rng: &mut R) -> usize {
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            rng.random_range(0..self.n_actions)
        } else {
            self.greedy(s, z)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Sequential Q-learning over the batch; returns mean absolute TD error.
/// Episodes end only by time limit, so targets always bootstrap.
pub fn q_learning_update(policy: &mut TabularPolicy, batch: &[TabularSample]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in batch {
        if t.state >= policy.n_states
            || t.next_state >= policy.n_states
            || t.skill >= policy.n_skills
            || t.action >= policy.n_actions
        {
            return Err(contract(format!("tabular sample out of range: {t:?}")));
        }
        let target = t.reward + policy.gamma * policy.max_q(t.next_state, t.skill);
        let q = policy.q(t.state, t.skill, t.action);
        let td = target - q;
        policy.set_q(t.state, t.skill, t.action, q + policy.lr * td);
        total += td.abs();
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = TabularPolicy::new(2, 1, 2, 0.1, 0.0, 0.9).unwrap();
        let before = p.clone();
        let td = q_learning_update(
            &mut p,
            &[TabularSample {
                state: 0,
                skill: 0,
                action: 1,
                reward: 3.0,
                next_state: 1,
            }],
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(td, 3.0);
    }

    #[test]
    fn single_step_unit_lr() {
        let mut p = TabularPolicy::new(2, 1, 2, 0.1, 1.0, 0.0).unwrap();
        let t = TabularSample {
            state: 0,
            skill: 0,
            action: 1,
            reward: 1.0,
            next_state: 1,
        };
        q_learning_update(&mut p, &[t]).unwrap();
        assert_eq!(p.q(0, 0, 1), 1.0);
    }

    #[test]
    fn greedy_ties_pick_lowest() {
        let mut p = TabularPolicy::new(1, 1, 4, 0.0, 0.5, 0.9).unwrap();
        assert_eq!(p.greedy(0, 0), 0);
        p.set_q(0, 0, 2, 1.0);
        p.set_q(0, 0, 3, 1.0);
        assert_eq!(p.greedy(0, 0), 2);
    }
}
