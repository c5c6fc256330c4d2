//! Intrinsic rewards: density deviation, latent-KL exploration and their combination.

use serde::{Deserialize, Serialize};

use crate::density::Cvae;
use crate::diffnet::Tensor2;
use crate::error::{contract, Result, Sd3Error};

/// Smallest standard deviation used when normalising a reward stream.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    RunningStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub normalization: Normalization,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 1.5,
            alpha: 0.04,
            normalization: Normalization::RunningStd,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Sd3Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Sd3Error::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration remarks (lambda below 1 is allowed for ablations).
    pub fn warnings(&self) -> Vec<String> {
        if self.lambda < 1.0 {
            vec![format!("lambda = {} < 1: skills may collapse", self.lambda)]
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r_sd3: f64,
    pub r_exp: f64,
    pub r_total: f64,
}

/// Value of the deviation reward when every skill has the same density.
pub fn equal_density_reward(lambda: f64, n: usize) -> f64 {
    let n = n as f64;
    (lambda * n / (lambda + n - 1.0)).ln()
}

/// Deviation reward plus a flag raised when every density underflowed and
/// the equal-density value was substituted.
///
/// Entries of `log_d` may be `-inf` (zero density) but not NaN or `+inf`.
pub fn r_sd3_checked(log_d: &[f64], z: usize, lambda: f64) -> Result<(f64, bool)> {
    let n = log_d.len();
    if z >= n {
        return Err(contract(format!("skill {z} out of range {n}")));
    }
    if log_d.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(contract("log-densities must be finite or -inf"));
    }
    if !(lambda > 0.0) {
        return Err(Sd3Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let max = log_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok((equal_density_reward(lambda, n), true));
    }
    // With p(z) = 1/n the prior cancels between numerator and denominator
    // except for a factor n: log(λ n d_z) - log(λ d_z + Σ_{z'≠z} d_z').
    let a: Vec<f64> = log_d.iter().map(|v| v - max).collect();
    let ln_lambda = lambda.ln();
    let terms = a
        .iter()
        .enumerate()
        .map(|(j, v)| if j == z { ln_lambda + v } else { *v });
    let lse = {
        let t: Vec<f64> = terms.collect();
        let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + t.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    Ok((ln_lambda + (n as f64).ln() + a[z] - lse, false))
}

/// `log(λ d_z) - log(λ d_z p(z) + Σ_{z'≠z} d_z' p(z'))` with `p(z) = 1/n`.
pub fn r_sd3(log_d: &[f64], z: usize, cfg: &RewardConfig) -> Result<f64> {
    r_sd3_checked(log_d, z, cfg.lambda).map(|(r, _)| r)
}

/// Latent KL reward for one `(s, z)`.
pub fn r_exp(cvae: &Cvae, s: &[f64], z: usize) -> Result<f64> {
    Ok(cvae.kl_batch(&Tensor2::row_vector(s), &[z])?[0])
}

/// Unnormalised combination `r_sd3 + α r_exp`.
pub fn combine(r_sd3: f64, r_exp: f64, cfg: &RewardConfig) -> f64 {
    r_sd3 + cfg.alpha * r_exp
}

/// `∂/∂ρ log(λ n d_z / (λ d_z + ρ)) = -1 / (λ d_z + ρ)`.
pub fn sd3_gradient_analytic(d_z: f64, rho: f64, lambda: f64) -> Result<f64> {
    let denom = lambda * d_z + rho;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Sd3Error::Domain(format!("λ d_z + ρ = {denom} is not positive")));
    }
    Ok(-1.0 / denom)
}

/// Per-instance deviation term `log(λ n d_z / (λ d_z + ρ))`.
pub fn sd3_instance(d_z: f64, rho: f64, lambda: f64, n: usize) -> f64 {
    (lambda * n as f64 * d_z / (lambda * d_z + rho)).ln()
}

/// Welford running variance; values are scaled by the running std with no
/// mean subtraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStd {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt().max(STD_FLOOR)
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        x / self.std()
    }
}

/// Running statistics of both reward streams; owned by the relabelling stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub sd3: RunningStd,
    pub exp: RunningStd,
    /// Number of times the equal-density fallback was used.
    pub degenerate_events: u64,
}

impl RewardNormalizer {
    /// Fold a batch of raw rewards into the statistics, then combine each
    /// pair under `cfg.normalization`.
    pub fn combine_batch(&mut self, raw: &[(f64, f64)], cfg: &RewardConfig) -> Vec<RewardBundle> {
        if cfg.normalization == Normalization::RunningStd {
            for &(a, b) in raw {
                self.sd3.update(a);
                self.exp.update(b);
            }
        }
        raw.iter()
            .map(|&(r_sd3, r_exp)| {
                let r_total = match cfg.normalization {
                    Normalization::None => combine(r_sd3, r_exp, cfg),
                    Normalization::RunningStd => self.sd3.normalize(r_sd3) + cfg.alpha * self.exp.normalize(r_exp),
                };
                RewardBundle { r_sd3, r_exp, r_total }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lambda: f64) -> RewardConfig {
        RewardConfig {
            lambda,
            alpha: 0.04,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn reward_examples() {
        assert!(r_sd3(&[0.3, 0.3], 0, &cfg(1.0)).unwrap().abs() < 1e-15);
        for lambda in [0.5, 1.0, 2.0, 7.0] {
            let r = r_sd3(&[0.0, f64::NEG_INFINITY], 0, &cfg(lambda)).unwrap();
            assert!((r - 2f64.ln()).abs() < 1e-15);
        }
        // log(4/3)
        let r = r_sd3(&[-1.0, -1.0], 1, &cfg(2.0)).unwrap();
        assert!((r - 0.287_682_072_451_780_9).abs() < 1e-15, "{r}");
    }

    #[test]
    fn degenerate_densities_fall_back() {
        let (r, flagged) = r_sd3_checked(&[f64::NEG_INFINITY; 3], 1, 2.0).unwrap();
        assert!(flagged);
        assert!((r - (6.0f64 / 4.0).ln()).abs() < 1e-15);
        assert!(r_sd3(&[0.0, f64::NAN], 0, &cfg(1.0)).is_err());
        assert!(r_sd3(&[0.0, 0.0], 2, &cfg(1.0)).is_err());
    }

    #[test]
    fn extreme_log_densities_are_stable() {
        let r = r_sd3(&[-2000.0, -2001.0], 0, &cfg(1.0)).unwrap();
        let expect = (2.0 / (1.0 + (-1f64).exp())).ln();
        assert!((r - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(sd3_gradient_analytic(0.5, 0.5, 1.0).unwrap(), -1.0);
        assert_eq!(sd3_gradient_analytic(0.25, 0.5, 2.0).unwrap(), -1.0);
        assert!(sd3_gradient_analytic(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn combine_examples() {
        assert!((combine(1.0, 2.0, &cfg(1.5)) - 1.08).abs() < 1e-15);
        let mut c = cfg(1.5);
        c.alpha = 0.0;
        assert_eq!(combine(0.7, 100.0, &c), 0.7);
    }

    #[test]
    fn normalizer_scales_without_centering() {
        let c = RewardConfig {
            normalization: Normalization::RunningStd,
            ..cfg(1.5)
        };
        let mut norm = RewardNormalizer::default();
        let out = norm.combine_batch(&[(1.0, 0.0), (3.0, 0.0)], &c);
        let std = 2f64.sqrt();
        assert!((out[0].r_total - 1.0 / std).abs() < 1e-12);
        // Constant stream: std hits the floor.
        assert!((norm.exp.std() - STD_FLOOR).abs() < 1e-18);
        let zero_alpha = RewardConfig { alpha: 0.0, ..c };
        let out = norm.combine_batch(&[(2.0, 5.0)], &zero_alpha);
        assert!((out[0].r_total - norm.sd3.normalize(2.0)).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(cfg(0.0).validate().is_err());
        assert!(cfg(0.5).validate().is_ok());
        assert_eq!(cfg(0.5).warnings().len(), 1);
        let bad = RewardConfig {
            alpha: -1.0,
            ..cfg(1.0)
        };
        assert!(bad.validate().is_err());
    }
}
