use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{contract, Result, Sd3Error};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian parameters; `log_std` is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(contract(format!(
                "gaussian head: mean has {} entries, log_std {}",
                mean.len(),
                log_std.len()
            )));
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn from_std(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        Self::new(mean, std.iter().map(|s| s.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// KL divergence to the standard normal.
    pub fn kl_to_standard(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
            .sum()
    }
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - ln sigma^2 - 1)`.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(contract("gaussian_kl: dimension mismatch"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Sd3Error::Domain(format!("gaussian_kl: sigma {s} is not positive")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
        .sum())
}

/// `h = mean + std * noise`.
pub fn reparam_sample(head: &GaussianHead, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != head.dim() {
        return Err(contract(format!(
            "reparam_sample: noise has {} entries, head has {}",
            noise.len(),
            head.dim()
        )));
    }
    Ok(head
        .mean
        .iter()
        .zip(&head.log_std)
        .zip(noise)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect())
}

/// Per-row KL to the standard normal, `B x 1`, from `mean` and (clamped) `log_std`.
pub fn kl_standard_rows(tape: &mut Tape<'_>, mean: Var, log_std: Var) -> Result<Var> {
    let m2 = tape.square(mean);
    let two_ls = tape.scale(log_std, 2.0);
    let var = tape.exp(two_ls);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.add_scalar(b, -1.0);
    let per_row = tape.sum_cols(c);
    Ok(tape.scale(per_row, 0.5))
}

/// Reparameterised sample on the tape; `noise` is a constant leaf.
pub fn reparam_rows(tape: &mut Tape<'_>, mean: Var, log_std: Var, noise: Var) -> Result<Var> {
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, noise)?;
    tape.add(mean, scaled)
}
