use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{optimizer_step, Activation, Mlp, OptimState, ParamGrads, ParamStore, Tape, Tensor2, Var};
use crate::error::{contract, Result, Sd3Error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorCriticConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Polyak rate of the target critic.
    pub tau: f64,
    /// Std of the Gaussian exploration noise added to actions.
    pub action_noise: f64,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 0.01,
            action_noise: 0.2,
        }
    }
}

impl ActorCriticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.actor_lr >= 0.0
            && self.critic_lr >= 0.0
            && (0.0..1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.tau)
            && self.action_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Sd3Error::Config(format!("invalid actor-critic settings: {self:?}")))
        }
    }
}

/// Skill-conditioned deterministic actor with a Q critic and a Polyak target critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub config: ActorCriticConfig,
    pub state_dim: usize,
    pub n_skills: usize,
    pub action_dim: usize,
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    pub target_store: ParamStore,
    actor: Mlp,
    critic: Mlp,
    actor_opt: OptimState,
    critic_opt: OptimState,
}

/// Relabelled continuous-control batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AcBatch {
    pub states: Tensor2,
    pub skills: Vec<usize>,
    pub actions: Tensor2,
    pub rewards: Vec<f64>,
    pub next_states: Tensor2,
}

impl ActorCritic {
    pub fn new<R: Rng>(
        state_dim: usize,
        n_skills: usize,
        action_dim: usize,
        config: ActorCriticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(
            &mut actor_store,
            "actor",
            &[state_dim + n_skills, h, h, action_dim],
            Activation::Tanh,
            rng,
        );
        let mut critic_store = ParamStore::new();
        let critic = Mlp::new(
            &mut critic_store,
            "critic",
            &[state_dim + n_skills + action_dim, h, h, 1],
            Activation::Identity,
            rng,
        );
        let actor_opt = OptimState::adam(&actor_store, config.actor_lr);
        let critic_opt = OptimState::adam(&critic_store, config.critic_lr);
        Ok(Self {
            target_store: critic_store.clone(),
            config,
            state_dim,
            n_skills,
            action_dim,
            actor_store,
            critic_store,
            actor,
            critic,
            actor_opt,
            critic_opt,
        })
    }

    fn check(&self, states: &Tensor2, skills: &[usize]) -> Result<()> {
        if states.cols() != self.state_dim || states.rows() != skills.len() {
            return Err(contract(format!(
                "actor-critic batch {:?} with {} skills, expected width {}",
                states.shape(),
                skills.len(),
                self.state_dim
            )));
        }
        if skills.iter().any(|z| *z >= self.n_skills) {
            return Err(contract("skill out of range"));
        }
        Ok(())
    }

    fn actor_var(&self, tape: &mut Tape<'_>, states: &Tensor2, skills: &[usize]) -> Result<Var> {
        let s = tape.leaf(states.clone());
        let oh = tape.leaf(Tensor2::one_hot(skills, self.n_skills)?);
        let x = tape.concat_cols(s, oh)?;
        self.actor.forward(tape, x)
    }

    fn critic_var(&self, tape: &mut Tape<'_>, states: &Tensor2, skills: &[usize], actions: Var) -> Result<Var> {
        let s = tape.leaf(states.clone());
        let oh = tape.leaf(Tensor2::one_hot(skills, self.n_skills)?);
        let x = tape.concat_cols(s, oh)?;
        let x = tape.concat_cols(x, actions)?;
        self.critic.forward(tape, x)
    }

    /// Deterministic actions, each component in `[-1, 1]`.
    pub fn act_batch(&self, states: &Tensor2, skills: &[usize]) -> Result<Tensor2> {
        self.check(states, skills)?;
        let mut tape = Tape::new(&self.actor_store);
        let a = self.actor_var(&mut tape, states, skills)?;
        Ok(tape.value(a).clone())
    }

    pub fn act(&self, s: &[f64], z: usize) -> Result<Vec<f64>> {
        Ok(self.act_batch(&Tensor2::row_vector(s), &[z])?.into_vec())
    }

    /// Action plus clipped Gaussian noise of std `sigma`.
    pub fn explore<R: Rng>(&self, s: &[f64], z: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.act(s, z)?;
        for v in &mut a {
            let e: f64 = rng.sample(StandardNormal);
            *v = (*v + sigma * e).clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    /// `Q(s, z, a)` under the given critic parameters, `B x 1`.
    pub fn q_values(
        &self,
        store: &ParamStore,
        states: &Tensor2,
        skills: &[usize],
        actions: &Tensor2,
    ) -> Result<Tensor2> {
        self.check(states, skills)?;
        let mut tape = Tape::new(store);
        let a = tape.leaf(actions.clone());
        let q = self.critic_var(&mut tape, states, skills, a)?;
        Ok(tape.value(q).clone())
    }

    /// `-mean Q(s, z, π(s, z))` and its gradient with respect to the actor
    /// parameters, chained through the critic's action gradient.
    pub fn actor_loss_and_grads(&self, states: &Tensor2, skills: &[usize]) -> Result<(f64, ParamGrads)> {
        self.check(states, skills)?;
        let mut actor_tape = Tape::new(&self.actor_store);
        let a = self.actor_var(&mut actor_tape, states, skills)?;
        let a_val = actor_tape.value(a).clone();

        let mut critic_tape = Tape::new(&self.critic_store);
        let a_leaf = critic_tape.leaf_with_grad(a_val);
        let q = self.critic_var(&mut critic_tape, states, skills, a_leaf)?;
        let mean_q = critic_tape.mean_all(q);
        let loss = -critic_tape.scalar(mean_q);
        let dq_da = critic_tape
            .backward(mean_q)?
            .wrt(a_leaf)
            .cloned()
            .ok_or_else(|| contract("critic has no action gradient"))?;
        let seed = dq_da.map(|g| -g);
        let grads = actor_tape.backward_from(a, seed)?.params(&actor_tape);
        Ok((loss, grads))
    }

    pub fn actor_loss(&self, states: &Tensor2, skills: &[usize]) -> Result<f64> {
        let actions = self.act_batch(states, skills)?;
        let q = self.q_values(&self.critic_store, states, skills, &actions)?;
        Ok(-q.sum() / q.rows() as f64)
    }

    pub fn polyak_update(&mut self) -> Result<()> {
        self.target_store.soft_update_from(&self.critic_store, self.config.tau)
    }
}

/// Critic regression to `r + γ Q_target(s', z, π(s', z))`, then one actor
/// ascent step on the critic, then a Polyak target update.
/// Returns `(critic loss, actor loss)` before the respective steps.
pub fn actor_critic_update(ac: &mut ActorCritic, batch: &AcBatch) -> Result<(f64, f64)> {
    let n = batch.states.rows();
    if n == 0
        || batch.rewards.len() != n
        || batch.actions.shape() != (n, ac.action_dim)
        || batch.next_states.shape() != batch.states.shape()
    {
        return Err(contract("actor-critic batch has inconsistent sizes"));
    }
    let next_actions = ac.act_batch(&batch.next_states, &batch.skills)?;
    let q_next = ac.q_values(&ac.target_store, &batch.next_states, &batch.skills, &next_actions)?;
    let targets: Vec<f64> = batch
        .rewards
        .iter()
        .zip(q_next.data())
        .map(|(r, q)| r + ac.config.gamma * q)
        .collect();
    let target = Tensor2::from_vec(n, 1, targets)?;

    let (critic_loss, critic_grads) = {
        let mut tape = Tape::new(&ac.critic_store);
        let a = tape.leaf(batch.actions.clone());
        let q = ac.critic_var(&mut tape, &batch.states, &batch.skills, a)?;
        let y = tape.leaf(target);
        let diff = tape.sub(q, y)?;
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Sd3Error::NonFiniteLoss {
                iteration: ac.critic_opt.step,
                diagnostics: format!(
                    "critic loss {value}, reward range [{:.3e}, {:.3e}]",
                    batch.rewards.iter().copied().fold(f64::INFINITY, f64::min),
                    batch.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                ),
            });
        }
        (value, tape.backward(loss)?.params(&tape))
    };
    optimizer_step(&mut ac.critic_store, &critic_grads, &mut ac.critic_opt)?;

    let (actor_loss, actor_grads) = ac.actor_loss_and_grads(&batch.states, &batch.skills)?;
    if !actor_loss.is_finite() {
        return Err(Sd3Error::NonFiniteLoss {
            iteration: ac.actor_opt.step,
            diagnostics: format!("actor loss {actor_loss}"),
        });
    }
    optimizer_step(&mut ac.actor_store, &actor_grads, &mut ac.actor_opt)?;
    ac.polyak_update()?;
    Ok((critic_loss, actor_loss))
}
