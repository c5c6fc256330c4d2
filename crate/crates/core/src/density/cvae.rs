use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{NetShape, SoftModularNet};
use super::routing::RoutingState;
use crate::diffnet::{
    kl_standard_rows, optimizer_step, reparam_rows, GaussianHead, OptimState, ParamStore, Tape, Tensor2, Var,
    LOG_STD_MAX, LOG_STD_MIN,
};
use crate::error::{contract, Result, Sd3Error};
use crate::io::{read_json, write_json};
use crate::parallel::{chunk_ranges, map_slice, Execution};

/// Diagonal Gaussian posterior `Q(h|s,z)`.
pub type LatentPosterior = GaussianHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub n_skills: usize,
    pub state_dim: usize,
    pub latent_dim: usize,
    /// Modules per layer.
    pub modules: usize,
    /// Routed layers per network.
    pub layers: usize,
    /// Module width.
    pub width: usize,
    /// KL weight.
    pub beta: f64,
    /// Fixed decoder standard deviation.
    pub sigma_dec: f64,
    pub soft_modularization: bool,
    /// ELBO samples averaged per estimate.
    pub elbo_samples: usize,
    pub learning_rate: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            n_skills: 10,
            state_dim: 2,
            latent_dim: 8,
            modules: 4,
            layers: 2,
            width: 64,
            beta: 1.0,
            sigma_dec: 0.1,
            soft_modularization: true,
            elbo_samples: 1,
            learning_rate: 1e-3,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Sd3Error::Config(format!("cvae: {m}")));
        if self.n_skills < 2 {
            return bad("n_skills must be at least 2");
        }
        if self.modules < 1 || self.layers < 1 || self.width < 1 {
            return bad("modules, layers and width must be at least 1");
        }
        if self.state_dim < 1 || self.latent_dim < 1 {
            return bad("state and latent dimensions must be positive");
        }
        if !(self.beta > 0.0) || !(self.sigma_dec > 0.0) {
            return bad("beta and sigma_dec must be positive");
        }
        if self.elbo_samples < 1 {
            return bad("elbo_samples must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Log-density of `x` under `N(mean, sigma² I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / (sigma * sigma) - x.len() as f64 * (sigma * (2.0 * PI).sqrt()).ln()
}

/// Standard normal noise matrix.
pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

/// Tape handles for one batched ELBO evaluation; all `B x 1`.
pub struct ElboVars {
    pub recon: Var,
    pub kl: Var,
    pub elbo: Var,
}

/// Soft-modular conditional VAE: encoder `Q(h|s,z)`, decoder `P(s|h,z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cvae {
    pub config: CvaeConfig,
    pub store: ParamStore,
    encoder: SoftModularNet,
    decoder: SoftModularNet,
}

/// Rows of states per parallel chunk when scoring all skills.
const ALL_SKILLS_CHUNK: usize = 16;

impl Cvae {
    pub fn new<R: Rng>(config: CvaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let shape = |input_dim, output_dim| NetShape {
            input_dim,
            n_skills: config.n_skills,
            width: config.width,
            modules: config.modules,
            layers: config.layers,
            output_dim,
            soft_modularization: config.soft_modularization,
        };
        let encoder = SoftModularNet::new(
            &mut store,
            "encoder",
            shape(config.state_dim, 2 * config.latent_dim),
            rng,
        )?;
        let decoder = SoftModularNet::new(&mut store, "decoder", shape(config.latent_dim, config.state_dim), rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encoder(&self) -> &SoftModularNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &SoftModularNet {
        &self.decoder
    }

    fn check_batch(&self, states: &Tensor2, skills: &[usize]) -> Result<()> {
        if states.cols() != self.config.state_dim || states.rows() != skills.len() {
            return Err(contract(format!(
                "cvae batch {:?} with {} skills, expected state width {}",
                states.shape(),
                skills.len(),
                self.config.state_dim
            )));
        }
        if let Some(z) = skills.iter().find(|z| **z >= self.config.n_skills) {
            return Err(contract(format!("skill {z} out of range {}", self.config.n_skills)));
        }
        if !states.is_finite() {
            return Err(contract("cvae states must be finite"));
        }
        Ok(())
    }

    /// Posterior mean and clamped log-std on the tape.
    fn encode_vars(&self, tape: &mut Tape<'_>, states: Var, onehot: Var) -> Result<(Var, Var)> {
        let k = self.config.latent_dim;
        let raw = self.encoder.forward(tape, states, onehot)?.out;
        let mean = tape.slice_cols(raw, 0, k)?;
        let ls = tape.slice_cols(raw, k, 2 * k)?;
        Ok((mean, tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Batched ELBO on the tape. `noise` has one row per state row.
    pub fn elbo_vars(
        &self,
        tape: &mut Tape<'_>,
        states: &Tensor2,
        skills: &[usize],
        noise: &Tensor2,
    ) -> Result<ElboVars> {
        self.check_batch(states, skills)?;
        if noise.shape() != (states.rows(), self.config.latent_dim) {
            return Err(contract(format!(
                "noise {:?} does not match {} rows of latent width {}",
                noise.shape(),
                states.rows(),
                self.config.latent_dim
            )));
        }
        let cfg = &self.config;
        let s = tape.leaf(states.clone());
        let oh = tape.leaf(Tensor2::one_hot(skills, cfg.n_skills)?);
        let eps = tape.leaf(noise.clone());
        let (mean, log_std) = self.encode_vars(tape, s, oh)?;
        let h = reparam_rows(tape, mean, log_std, eps)?;
        let recon_mean = self.decoder.forward(tape, h, oh)?.out;
        let diff = tape.sub(s, recon_mean)?;
        let sq = tape.square(diff);
        let sq = tape.sum_cols(sq);
        let recon = tape.scale(sq, -0.5 / (cfg.sigma_dec * cfg.sigma_dec));
        let norm = cfg.state_dim as f64 * (cfg.sigma_dec * (2.0 * PI).sqrt()).ln();
        let recon = tape.add_scalar(recon, -norm);
        let kl = kl_standard_rows(tape, mean, log_std)?;
        let wkl = tape.scale(kl, cfg.beta);
        let elbo = tape.sub(recon, wkl)?;
        Ok(ElboVars { recon, kl, elbo })
    }

    /// `-mean(ELBO)` over a batch, on the tape.
    pub fn loss_var(&self, tape: &mut Tape<'_>, states: &Tensor2, skills: &[usize], noise: &Tensor2) -> Result<Var> {
        let v = self.elbo_vars(tape, states, skills, noise)?;
        let m = tape.mean_all(v.elbo);
        Ok(tape.scale(m, -1.0))
    }

    pub fn encode(&self, s: &[f64], z: usize) -> Result<LatentPosterior> {
        let (mean, log_std) = self.encode_batch(&Tensor2::row_vector(s), &[z])?;
        GaussianHead::new(mean.into_vec(), log_std.into_vec())
    }

    /// Posterior means and log-stds for a batch.
    pub fn encode_batch(&self, states: &Tensor2, skills: &[usize]) -> Result<(Tensor2, Tensor2)> {
        self.check_batch(states, skills)?;
        let mut tape = Tape::new(&self.store);
        let s = tape.leaf(states.clone());
        let oh = tape.leaf(Tensor2::one_hot(skills, self.config.n_skills)?);
        let (mean, ls) = self.encode_vars(&mut tape, s, oh)?;
        Ok((tape.value(mean).clone(), tape.value(ls).clone()))
    }

    /// KL of the posterior to the standard normal prior, per row.
    pub fn kl_batch(&self, states: &Tensor2, skills: &[usize]) -> Result<Vec<f64>> {
        let (mean, ls) = self.encode_batch(states, skills)?;
        Ok((0..mean.rows())
            .map(|r| {
                mean.row(r)
                    .iter()
                    .zip(ls.row(r))
                    .map(|(m, l)| 0.5 * (m * m + (2.0 * l).exp() - 2.0 * l - 1.0))
                    .sum()
            })
            .collect())
    }

    /// Reconstruction mean for latent `h` under skill `z`.
    pub fn decode(&self, h: &[f64], z: usize) -> Result<Vec<f64>> {
        if h.len() != self.config.latent_dim {
            return Err(contract(format!(
                "latent has {} entries, expected {}",
                h.len(),
                self.config.latent_dim
            )));
        }
        if z >= self.config.n_skills {
            return Err(contract(format!("skill {z} out of range {}", self.config.n_skills)));
        }
        let mut tape = Tape::new(&self.store);
        let hv = tape.leaf(Tensor2::row_vector(h));
        let oh = tape.leaf(Tensor2::one_hot(&[z], self.config.n_skills)?);
        let out = self.decoder.forward(&mut tape, hv, oh)?.out;
        Ok(tape.value(out).data().to_vec())
    }

    /// `log P(s|h,z)` under the fixed-variance decoder.
    pub fn decode_log_prob(&self, s: &[f64], h: &[f64], z: usize) -> Result<f64> {
        let mean = self.decode(h, z)?;
        if s.len() != mean.len() {
            return Err(contract("state width differs from decoder output"));
        }
        Ok(gaussian_log_density(s, &mean, self.config.sigma_dec))
    }

    /// Single-sample ELBO for one `(s, z)`.
    pub fn elbo(&self, s: &[f64], z: usize, noise: &[f64]) -> Result<ElboBreakdown> {
        let out = self.elbo_batch(&Tensor2::row_vector(s), &[z], &Tensor2::row_vector(noise))?;
        Ok(out[0])
    }

    /// ELBO per state. `noise` holds `K` rows per state, state-major; the
    /// `K` estimates are averaged.
    pub fn elbo_batch(&self, states: &Tensor2, skills: &[usize], noise: &Tensor2) -> Result<Vec<ElboBreakdown>> {
        let b = states.rows();
        if b == 0 || !noise.rows().is_multiple_of(b) {
            return Err(contract("noise rows must be a positive multiple of the batch"));
        }
        let k = noise.rows() / b;
        let (states_k, skills_k) = expand_rows(states, skills, k);
        let mut tape = Tape::new(&self.store);
        let v = self.elbo_vars(&mut tape, &states_k, &skills_k, noise)?;
        let (recon, kl, elbo) = (tape.value(v.recon), tape.value(v.kl), tape.value(v.elbo));
        Ok((0..b)
            .map(|i| {
                let avg = |t: &Tensor2| t.data()[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64;
                ElboBreakdown {
                    recon: avg(recon),
                    kl: avg(kl),
                    elbo: avg(elbo),
                }
            })
            .collect())
    }

    /// ELBO of every state under every skill, `B x n`. `noise` has
    /// `B * n * K` rows ordered `(state, skill, sample)`.
    pub fn elbo_all_skills(&self, states: &Tensor2, noise: &Tensor2, exec: Execution) -> Result<Tensor2> {
        let n = self.config.n_skills;
        let b = states.rows();
        if b == 0 || !noise.rows().is_multiple_of(b * n) || noise.cols() != self.config.latent_dim {
            return Err(contract(format!(
                "all-skill noise {:?} must have a positive multiple of {} rows",
                noise.shape(),
                b * n
            )));
        }
        let k = noise.rows() / (b * n);
        let chunks = chunk_ranges(b, ALL_SKILLS_CHUNK);
        let parts = map_slice(exec, &chunks, |range| -> Result<Vec<f64>> {
            let sub = states.slice_rows(range.clone());
            let rows = sub.rows();
            let mut rep = Tensor2::zeros(rows * n, sub.cols());
            let mut skills = Vec::with_capacity(rows * n);
            for r in 0..rows {
                for z in 0..n {
                    rep.row_mut(r * n + z).copy_from_slice(sub.row(r));
                    skills.push(z);
                }
            }
            let eps = noise.slice_rows(range.start * n * k..range.end * n * k);
            Ok(self
                .elbo_batch(&rep, &skills, &eps)?
                .into_iter()
                .map(|e| e.elbo)
                .collect())
        });
        let mut data = Vec::with_capacity(b * n);
        for p in parts {
            data.extend(p?);
        }
        Tensor2::from_vec(b, n, data)
    }

    /// Draws noise and scores every state under every skill.
    pub fn log_density_all<R: Rng>(&self, states: &Tensor2, rng: &mut R, exec: Execution) -> Result<Tensor2> {
        let rows = states.rows() * self.config.n_skills * self.config.elbo_samples;
        let noise = standard_normal(rows, self.config.latent_dim, rng);
        self.elbo_all_skills(states, &noise, exec)
    }

    pub fn encoder_routing(&self, s: &[f64], z: usize) -> Result<Option<RoutingState>> {
        if z >= self.config.n_skills {
            return Err(contract(format!("skill {z} out of range {}", self.config.n_skills)));
        }
        self.encoder.routing_state(&self.store, s, z)
    }

    pub fn new_optimizer(&self) -> OptimState {
        OptimState::adam(&self.store, self.config.learning_rate)
    }

    /// One Adam step on `-mean(ELBO)`; returns the loss before the step.
    pub fn train_step<R: Rng>(
        &mut self,
        opt: &mut OptimState,
        states: &Tensor2,
        skills: &[usize],
        rng: &mut R,
    ) -> Result<f64> {
        if states.rows() == 0 {
            return Err(contract("cvae_train_step needs a nonempty batch"));
        }
        let noise = standard_normal(states.rows(), self.config.latent_dim, rng);
        let grads = {
            let mut tape = Tape::new(&self.store);
            let v = self.elbo_vars(&mut tape, states, skills, &noise)?;
            let mean = tape.mean_all(v.elbo);
            let loss_var = tape.scale(mean, -1.0);
            let loss = tape.scalar(loss_var);
            if !loss.is_finite() {
                let mean_of = |x: Var| tape.value(x).sum() / states.rows() as f64;
                return Err(Sd3Error::NonFiniteLoss {
                    iteration: opt.step,
                    diagnostics: format!(
                        "state norm {:.4e}, mean kl {:.4e}, mean recon {:.4e}",
                        states.norm(),
                        mean_of(v.kl),
                        mean_of(v.recon)
                    ),
                });
            }
            (loss, tape.backward(loss_var)?.params(&tape))
        };
        let (loss, grads) = grads;
        optimizer_step(&mut self.store, &grads, opt)?;
        Ok(loss)
    }
}

fn expand_rows(states: &Tensor2, skills: &[usize], k: usize) -> (Tensor2, Vec<usize>) {
    if k == 1 {
        return (states.clone(), skills.to_vec());
    }
    let mut out = Tensor2::zeros(states.rows() * k, states.cols());
    let mut sk = Vec::with_capacity(states.rows() * k);
    for (r, &z) in skills.iter().enumerate() {
        for j in 0..k {
            out.row_mut(r * k + j).copy_from_slice(states.row(r));
            sk.push(z);
        }
    }
    (out, sk)
}

/// Model plus optimizer state, stored as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeCheckpoint {
    pub cvae: Cvae,
    pub optim: OptimState,
}

impl CvaeCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: CvaeCheckpoint = read_json(path)?;
        ck.cvae.config.validate()?;
        Ok(ck)
    }
}
