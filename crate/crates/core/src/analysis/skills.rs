use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{optimizer_step, Activation, Mlp, OptimState, ParamStore, Tape, Tensor2};
use crate::error::{contract, Result, Sd3Error};

/// Softmax classifier `q(z | s)` over `n` skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub input_dim: usize,
    pub n_skills: usize,
    pub store: ParamStore,
    net: Mlp,
    opt: OptimState,
}

impl Discriminator {
    /// Two hidden ReLU layers of width `hidden`.
    pub fn new<R: Rng>(input_dim: usize, n_skills: usize, hidden: usize, lr: f64, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || n_skills == 0 || hidden == 0 {
            return Err(contract("discriminator dimensions must be positive"));
        }
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "disc",
            &[input_dim, hidden, hidden, n_skills],
            Activation::Identity,
            rng,
        );
        let opt = OptimState::adam(&store, lr);
        Ok(Self {
            input_dim,
            n_skills,
            store,
            net,
            opt,
        })
    }

    fn check(&self, states: &Tensor2) -> Result<()> {
        if states.cols() != self.input_dim {
            return Err(contract(format!(
                "discriminator input width {} != {}",
                states.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// `log q(z | s)` for every skill, `B x n`.
    pub fn log_probs(&self, states: &Tensor2) -> Result<Tensor2> {
        self.check(states)?;
        let mut tape = Tape::new(&self.store);
        let x = tape.leaf(states.clone());
        let logits = self.net.forward(&mut tape, x)?;
        let lp = tape.log_softmax(logits);
        Ok(tape.value(lp).clone())
    }

    /// Most likely skill per row; ties go to the lowest id.
    pub fn predict(&self, states: &Tensor2) -> Result<Vec<usize>> {
        let lp = self.log_probs(states)?;
        Ok((0..lp.rows()).map(|r| crate::agent::argmax_first(lp.row(r))).collect())
    }

    /// One Adam step on the mean cross-entropy; returns the loss before the step.
    pub fn train_step(&mut self, states: &Tensor2, skills: &[usize]) -> Result<f64> {
        self.check(states)?;
        if states.rows() == 0 || states.rows() != skills.len() {
            return Err(contract("discriminator batch must be nonempty with one skill per row"));
        }
        let (loss, grads) = {
            let mut tape = Tape::new(&self.store);
            let x = tape.leaf(states.clone());
            let logits = self.net.forward(&mut tape, x)?;
            let lp = tape.log_softmax(logits);
            let oh = tape.leaf(Tensor2::one_hot(skills, self.n_skills)?);
            let picked = tape.mul(lp, oh)?;
            let total = tape.sum_all(picked);
            let loss = tape.scale(total, -1.0 / states.rows() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Sd3Error::NonFiniteLoss {
                    iteration: self.opt.step,
                    diagnostics: format!("discriminator loss {value}, input norm {:.4e}", states.norm()),
                });
            }
            (value, tape.backward(loss)?.params(&tape))
        };
        optimizer_step(&mut self.store, &grads, &mut self.opt)?;
        Ok(loss)
    }
}

/// `log q(z | s) + log n`.
pub fn diayn_reward_from_log_prob(log_q: f64, n: usize) -> f64 {
    log_q + (n as f64).ln()
}

pub fn diayn_reward(disc: &Discriminator, s: &[f64], z: usize) -> Result<f64> {
    if z >= disc.n_skills {
        return Err(contract(format!("skill {z} out of range {}", disc.n_skills)));
    }
    let lp = disc.log_probs(&Tensor2::row_vector(s))?;
    Ok(diayn_reward_from_log_prob(lp.get(0, z), disc.n_skills))
}

/// Folds used by the final-state classifier.
pub const DISCRIMINABILITY_FOLDS: usize = 5;
const CLASSIFIER_HIDDEN: usize = 32;
const CLASSIFIER_STEPS: usize = 300;
const CLASSIFIER_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityReport {
    pub endpoint_spread: f64,
    pub accuracy: f64,
    pub skill_means: Vec<Vec<f64>>,
    pub fold_accuracy: Vec<f64>,
}

/// Endpoint spread and k-fold accuracy of a classifier predicting the skill
/// from the final state. `endpoints[z]` holds the final states of skill `z`.
pub fn skill_discriminability(endpoints: &[Vec<Vec<f64>>], seed: u64) -> Result<DiscriminabilityReport> {
    let n = endpoints.len();
    if n < 2 {
        return Err(contract("discriminability needs at least 2 skills"));
    }
    let dim = endpoints[0].first().map_or(0, Vec::len);
    for (z, group) in endpoints.iter().enumerate() {
        if group.len() < DISCRIMINABILITY_FOLDS {
            return Err(contract(format!(
                "skill {z} has {} trajectories, need at least {DISCRIMINABILITY_FOLDS}",
                group.len()
            )));
        }
        if dim == 0 || group.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(contract(format!("skill {z} has malformed final states")));
        }
    }

    let skill_means: Vec<Vec<f64>> = endpoints
        .iter()
        .map(|g| {
            (0..dim)
                .map(|d| g.iter().map(|p| p[d]).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    let mut dist_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = skill_means[i]
                .iter()
                .zip(&skill_means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist_sum += d2.sqrt();
            pairs += 1;
        }
    }

    // Stratified folds: the k-th endpoint of every skill goes to fold k mod K.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut fold_accuracy = Vec::with_capacity(DISCRIMINABILITY_FOLDS);
    for fold in 0..DISCRIMINABILITY_FOLDS {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (z, group) in endpoints.iter().enumerate() {
            for (k, p) in group.iter().enumerate() {
                if k % DISCRIMINABILITY_FOLDS == fold {
                    test.push((z, p));
                } else {
                    train.push((z, p));
                }
            }
        }
        let (mean, scale) = standardizer(train.iter().map(|(_, p)| p.as_slice()), dim);
        let to_tensor = |rows: &[(usize, &Vec<f64>)]| -> Result<Tensor2> {
            let data = rows
                .iter()
                .flat_map(|(_, p)| p.iter().enumerate().map(|(d, v)| (v - mean[d]) / scale[d]))
                .collect();
            Tensor2::from_vec(rows.len(), dim, data)
        };
        let xtr = to_tensor(&train)?;
        let ytr: Vec<usize> = train.iter().map(|(z, _)| *z).collect();
        let mut clf = Discriminator::new(dim, n, CLASSIFIER_HIDDEN, CLASSIFIER_LR, &mut rng)?;
        for _ in 0..CLASSIFIER_STEPS {
            clf.train_step(&xtr, &ytr)?;
        }
        let pred = clf.predict(&to_tensor(&test)?)?;
        let hits = pred.iter().zip(&test).filter(|(p, (z, _))| *p == z).count();
        fold_accuracy.push(hits as f64 / test.len() as f64);
        correct += hits;
        total += test.len();
    }

    Ok(DiscriminabilityReport {
        endpoint_spread: dist_sum / pairs as f64,
        accuracy: correct as f64 / total as f64,
        skill_means,
        fold_accuracy,
    })
}

fn standardizer<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let count = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            var[d] += (r[d] - mean[d]).powi(2) / count;
        }
    }
    let scale = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressMetaReport {
    pub selected: usize,
    pub mean_returns: Vec<f64>,
    pub steps_per_skill: usize,
}

/// Gives each skill `budget / n` environment steps through `mean_return(z,
/// steps)` and picks the skill with the highest mean return (lowest id on ties).
pub fn regress_meta_select<F>(n: usize, budget: usize, mut mean_return: F) -> Result<RegressMetaReport>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if n == 0 {
        return Err(contract("regress-meta needs at least one skill"));
    }
    if !budget.is_multiple_of(n) {
        return Err(contract(format!("budget {budget} is not divisible by {n} skills")));
    }
    let steps = budget / n;
    let mean_returns = (0..n).map(|z| mean_return(z, steps)).collect::<Result<Vec<f64>>>()?;
    if let Some(bad) = mean_returns.iter().find(|r| r.is_nan()) {
        return Err(Sd3Error::Domain(format!("skill return is {bad}")));
    }
    Ok(RegressMetaReport {
        selected: crate::agent::argmax_first(&mean_returns),
        mean_returns,
        steps_per_skill: steps,
    })
}
