use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{Cvae, CvaeConfig};
use crate::diffnet::Tensor2;
use crate::error::{contract, Result};
use crate::parallel::{map_range, Execution};
use crate::rewards::{r_sd3_checked, sd3_gradient_analytic, sd3_instance};

use super::theorems::{i_sd3_exact, mi_exact, random_occupancies, verify_theorem1};

/// Skills whose states are isotropic 2-D Gaussians around fixed means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl SyntheticTask {
    /// Two skills at `(±offset, 0)`.
    pub fn two_skills(offset: f64, sigma: f64) -> Self {
        Self {
            means: vec![[-offset, 0.0], [offset, 0.0]],
            sigma,
        }
    }

    pub fn n_skills(&self) -> usize {
        self.means.len()
    }

    pub fn sample<R: Rng>(&self, z: usize, rng: &mut R) -> [f64; 2] {
        let m = self.means[z];
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        [m[0] + self.sigma * e0, m[1] + self.sigma * e1]
    }

    pub fn log_density(&self, s: &[f64], z: usize) -> f64 {
        let m = self.means[z];
        let v = self.sigma * self.sigma;
        let d2 = (s[0] - m[0]).powi(2) + (s[1] - m[1]).powi(2);
        -d2 / (2.0 * v) - (2.0 * std::f64::consts::PI * v).ln()
    }

    /// `E_z[log p(s|z)]` under the skill's own distribution: `-log(2πσ²) - 1`.
    pub fn mean_log_density(&self) -> f64 {
        -(2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln() - 1.0
    }

    /// `count` states per skill with their skill ids, skill-major.
    pub fn dataset<R: Rng>(&self, count: usize, rng: &mut R) -> (Tensor2, Vec<usize>) {
        let mut data = Vec::with_capacity(2 * count * self.n_skills());
        let mut skills = Vec::with_capacity(count * self.n_skills());
        for z in 0..self.n_skills() {
            for _ in 0..count {
                data.extend(self.sample(z, rng));
                skills.push(z);
            }
        }
        (Tensor2::from_vec(skills.len(), 2, data).expect("sized"), skills)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub mean_elbo: Vec<f64>,
    pub true_mean_log_density: f64,
    /// `|mean ELBO - true mean log-density|` per skill.
    pub elbo_error: Vec<f64>,
    /// Fraction of `(state, skill)` pairs where the ELBO-based and the exact
    /// deviation rewards share a sign.
    pub sign_agreement: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelityConfig {
    pub cvae: CvaeConfig,
    pub train_steps: usize,
    pub batch_size: usize,
    pub eval_states: usize,
    pub lambda: f64,
    /// ELBO samples averaged per evaluation estimate.
    pub eval_samples: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            cvae: CvaeConfig {
                n_skills: 2,
                state_dim: 2,
                ..CvaeConfig::default()
            },
            train_steps: 3_000,
            batch_size: 128,
            eval_states: 500,
            lambda: 1.5,
            eval_samples: 8,
        }
    }
}

/// Trains a CVAE on fresh samples of `task` and compares its ELBO with the
/// exact log-densities.
pub fn elbo_fidelity(task: &SyntheticTask, cfg: &FidelityConfig, seed: u64, exec: Execution) -> Result<FidelityReport> {
    let n = task.n_skills();
    if cfg.cvae.n_skills != n || cfg.cvae.state_dim != 2 {
        return Err(contract("fidelity CVAE must have one skill per mode and 2-D states"));
    }
    if cfg.eval_states == 0 || cfg.batch_size == 0 || cfg.eval_samples == 0 {
        return Err(contract(
            "fidelity run needs positive batch, evaluation and sample counts",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cvae = Cvae::new(cfg.cvae.clone(), &mut rng)?;
    let mut opt = cvae.new_optimizer();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.train_steps {
        let skills: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let data = skills.iter().flat_map(|&z| task.sample(z, &mut rng)).collect();
        let x = Tensor2::from_vec(cfg.batch_size, 2, data)?;
        final_loss = cvae.train_step(&mut opt, &x, &skills, &mut rng)?;
    }

    let mut eval_cvae = cvae.clone();
    eval_cvae.config.elbo_samples = cfg.eval_samples;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let (states, own) = task.dataset(cfg.eval_states, &mut eval_rng);
    let log_d = eval_cvae.log_density_all(&states, &mut eval_rng, exec)?;

    let mut mean_elbo = vec![0.0; n];
    let mut agree = 0usize;
    for r in 0..states.rows() {
        mean_elbo[own[r]] += log_d.get(r, own[r]) / cfg.eval_states as f64;
        let exact: Vec<f64> = (0..n).map(|z| task.log_density(states.row(r), z)).collect();
        for z in 0..n {
            let (est, _) = r_sd3_checked(log_d.row(r), z, cfg.lambda)?;
            let (truth, _) = r_sd3_checked(&exact, z, cfg.lambda)?;
            if est.signum() == truth.signum() {
                agree += 1;
            }
        }
    }
    let truth = task.mean_log_density();
    Ok(FidelityReport {
        elbo_error: mean_elbo.iter().map(|e| (e - truth).abs()).collect(),
        mean_elbo,
        true_mean_log_density: truth,
        sign_agreement: agree as f64 / (states.rows() * n) as f64,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub points: usize,
    pub max_relative_error: f64,
    /// Worst point as `(d_z, rho, lambda)`.
    pub worst_point: (f64, f64, f64),
}

/// Compares `-1/(λ d_z + ρ)` with central differences of the per-instance
/// deviation term in `ρ` at random points.
pub fn verify_sd3_gradient(points: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, (0.0, 0.0, 0.0));
    for _ in 0..points {
        let d_z = rng.random_range(0.05..1.0);
        let rho = rng.random_range(0.05..2.0);
        let lambda = rng.random_range(1.0..4.0);
        let n = rng.random_range(2..11);
        let analytic = sd3_gradient_analytic(d_z, rho, lambda)?;
        let h = 1e-5 * rho;
        let fd = (sd3_instance(d_z, rho + h, lambda, n) - sd3_instance(d_z, rho - h, lambda, n)) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs();
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, (d_z, rho, lambda));
        }
    }
    Ok(GradientReport {
        points,
        max_relative_error: worst.0,
        worst_point: worst.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1SweepReport {
    pub tuples: usize,
    pub lambdas: Vec<f64>,
    pub violations: usize,
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
    /// Largest `|I_SD3(1) - I(S;Z)|`.
    pub max_lambda_one_gap: f64,
    pub first_failure: Option<String>,
}

/// Sandwich-bound checks over `tuples` random occupancy tuples cycling through
/// skill counts {2, 3, 5} and state counts {4, 10, 25}.
pub fn theorem1_sweep(tuples: usize, lambdas: &[f64], seed: u64, exec: Execution) -> Result<Theorem1SweepReport> {
    const SKILLS: [usize; 3] = [2, 3, 5];
    const STATES: [usize; 3] = [4, 10, 25];
    // Per tuple: the minimum margins or the failure message, plus the lambda = 1 gap.
    type Outcome = (std::result::Result<(f64, f64), String>, f64);
    let results = map_range(exec, tuples, |i| -> Result<Outcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let n = SKILLS[i % 3];
        let ns = STATES[(i / 3) % 3];
        let sparsity = [0.0, 0.3, 0.7][(i / 9) % 3];
        let occ = random_occupancies(n, ns, sparsity, &mut rng);
        let gap = (i_sd3_exact(&occ, 1.0)? - mi_exact(&occ)?).abs();
        let outcome = match verify_theorem1(&occ, lambdas) {
            Ok(rep) => Ok(rep.rows.iter().fold((f64::INFINITY, f64::INFINITY), |acc, r| {
                (acc.0.min(r.lower_margin), acc.1.min(r.upper_margin))
            })),
            Err(e) => Err(e.to_string()),
        };
        Ok((outcome, gap))
    });
    let mut report = Theorem1SweepReport {
        tuples,
        lambdas: lambdas.to_vec(),
        violations: 0,
        min_lower_margin: f64::INFINITY,
        min_upper_margin: f64::INFINITY,
        max_lambda_one_gap: 0.0,
        first_failure: None,
    };
    for r in results {
        let (outcome, gap) = r?;
        report.max_lambda_one_gap = report.max_lambda_one_gap.max(gap);
        match outcome {
            Ok((lo, hi)) => {
                report.min_lower_margin = report.min_lower_margin.min(lo);
                report.min_upper_margin = report.min_upper_margin.min(hi);
            }
            Err(msg) => {
                report.violations += 1;
                report.first_failure.get_or_insert(msg);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_constants() {
        let t = SyntheticTask::two_skills(0.5, 0.1);
        assert!((t.mean_log_density() - 1.767_293_119_578_746).abs() < 1e-12);
        assert!((t.log_density(&[-0.5, 0.0], 0) - 2.767_293_119_578_746).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let r = verify_sd3_gradient(100, 3).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn small_sweep_is_clean() {
        let r = theorem1_sweep(60, &[1.0, 1.5, 2.0, 3.0], 0, Execution::Sequential).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
        assert!(r.max_lambda_one_gap < 1e-12);
        assert!(r.min_lower_margin >= -1e-9);
    }
}
