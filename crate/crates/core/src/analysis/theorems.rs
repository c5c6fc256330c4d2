use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TabularMDP;
use crate::error::{contract, Result, Sd3Error};

/// Largest state count solved directly; bigger MDPs use fixed-point iteration.
pub const DIRECT_SOLVE_MAX_STATES: usize = 2000;

/// Normalised discounted state occupancy of one skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyVector {
    pub probs: Vec<f64>,
    pub gamma: f64,
}

/// Action probabilities `policy[s][a]` of one skill.
pub type StochasticPolicy = Vec<Vec<f64>>;

/// Solves `d = (1 - γ) μ0 + γ P_πᵀ d` for a point-mass start distribution.
pub fn exact_occupancy(mdp: &TabularMDP, policy: &StochasticPolicy) -> Result<OccupancyVector> {
    exact_occupancy_with_gamma(mdp, policy, mdp.gamma)
}

pub fn exact_occupancy_with_gamma(mdp: &TabularMDP, policy: &StochasticPolicy, gamma: f64) -> Result<OccupancyVector> {
    let ns = mdp.n_states();
    if policy.len() != ns {
        return Err(contract("policy must have one row per state"));
    }
    for (s, row) in policy.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != mdp.n_actions() || (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
            return Err(contract(format!("policy row {s} is not a distribution over actions")));
        }
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(contract(format!("discount {gamma} not in (0, 1)")));
    }
    // Sparse state-to-state kernel under the policy.
    let mut kernel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
    for (s, row) in policy.iter().enumerate() {
        for (a, pa) in row.iter().enumerate() {
            if *pa == 0.0 {
                continue;
            }
            for &(t, p) in mdp.transition(s, a) {
                kernel[s].push((t, pa * p));
            }
        }
    }
    let start = mdp.initial_state;
    let probs = if ns <= DIRECT_SOLVE_MAX_STATES {
        let mut m = DMatrix::<f64>::identity(ns, ns);
        for (s, row) in kernel.iter().enumerate() {
            for &(t, p) in row {
                m[(t, s)] -= gamma * p;
            }
        }
        let mut rhs = DVector::<f64>::zeros(ns);
        rhs[start] = 1.0 - gamma;
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Sd3Error::Verification("occupancy system is singular".into()))?;
        sol.iter().map(|v| v.max(0.0)).collect::<Vec<f64>>()
    } else {
        let mut d = vec![0.0; ns];
        d[start] = 1.0 - gamma;
        loop {
            let mut next = vec![0.0; ns];
            next[start] = 1.0 - gamma;
            for (s, row) in kernel.iter().enumerate() {
                for &(t, p) in row {
                    next[t] += gamma * p * d[s];
                }
            }
            let delta = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            d = next;
            if delta < 1e-13 {
                break;
            }
        }
        d
    };
    let total: f64 = probs.iter().sum();
    Ok(OccupancyVector {
        probs: probs.iter().map(|p| p / total).collect(),
        gamma,
    })
}

fn check_occupancies(occ: &[Vec<f64>]) -> Result<usize> {
    let ns = occ.first().map_or(0, Vec::len);
    if occ.is_empty() || ns == 0 {
        return Err(contract("need at least one nonempty occupancy"));
    }
    for (z, d) in occ.iter().enumerate() {
        let sum: f64 = d.iter().sum();
        if d.len() != ns || (sum - 1.0).abs() > 1e-9 || d.iter().any(|p| !(*p >= 0.0)) {
            return Err(contract(format!(
                "occupancy {z} is not a distribution over {ns} states"
            )));
        }
    }
    Ok(ns)
}

/// Exact density deviation with a uniform skill prior.
pub fn i_sd3_exact(occ: &[Vec<f64>], lambda: f64) -> Result<f64> {
    let ns = check_occupancies(occ)?;
    let n = occ.len() as f64;
    let mut total = 0.0;
    for s in 0..ns {
        let col_sum: f64 = occ.iter().map(|d| d[s]).sum();
        for d in occ {
            let dz = d[s];
            if dz <= 0.0 {
                continue;
            }
            let denom = lambda * dz / n + (col_sum - dz) / n;
            total += dz / n * (lambda * dz / denom).ln();
        }
    }
    Ok(total)
}

/// Exact `I(S; Z)` with a uniform skill prior.
pub fn mi_exact(occ: &[Vec<f64>]) -> Result<f64> {
    let ns = check_occupancies(occ)?;
    let n = occ.len() as f64;
    let mut total = 0.0;
    for s in 0..ns {
        let marginal: f64 = occ.iter().map(|d| d[s]).sum::<f64>() / n;
        for d in occ {
            if d[s] > 0.0 {
                total += d[s] / n * (d[s] / marginal).ln();
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub lambda: f64,
    pub mi: f64,
    pub i_sd3: f64,
    /// `I_SD3 - I(S;Z)`, must be ≥ 0.
    pub lower_margin: f64,
    /// `log λ + I(S;Z) - I_SD3`, must be ≥ 0.
    pub upper_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    pub tolerance: f64,
}

pub const THEOREM1_TOL: f64 = 1e-9;

/// Checks the sandwich bound and monotonicity in λ for one occupancy tuple.
pub fn verify_theorem1(occ: &[Vec<f64>], lambdas: &[f64]) -> Result<Theorem1Report> {
    let mi = mi_exact(occ)?;
    let mut rows: Vec<Theorem1Row> = Vec::with_capacity(lambdas.len());
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &lambda in &sorted {
        if !(lambda >= 1.0) {
            return Err(contract(format!("lambda grid must lie in [1, inf), got {lambda}")));
        }
        let v = i_sd3_exact(occ, lambda)?;
        let row = Theorem1Row {
            lambda,
            mi,
            i_sd3: v,
            lower_margin: v - mi,
            upper_margin: lambda.ln() + mi - v,
        };
        if row.lower_margin < -THEOREM1_TOL || row.upper_margin < -THEOREM1_TOL {
            return Err(Sd3Error::Verification(format!(
                "sandwich violated at lambda={lambda}: {row:?} for occupancies {occ:?}"
            )));
        }
        if let Some(prev) = rows.last() {
            if v < prev.i_sd3 - THEOREM1_TOL {
                return Err(Sd3Error::Verification(format!(
                    "I_SD3 decreased from {} (lambda={}) to {v} (lambda={lambda}) for occupancies {occ:?}",
                    prev.i_sd3, prev.lambda
                )));
            }
        }
        rows.push(row);
    }
    Ok(Theorem1Report {
        rows,
        tolerance: THEOREM1_TOL,
    })
}

/// Random occupancy tuple; each state is dropped from a skill's support with
/// probability `sparsity` so overlapping and disjoint supports both occur.
pub fn random_occupancies<R: Rng>(n: usize, n_states: usize, sparsity: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let raw: Vec<f64> = (0..n_states)
                .map(|_| {
                    if rng.random::<f64>() < sparsity {
                        0.0
                    } else {
                        // Exponential weights give a flat Dirichlet draw.
                        -(1.0 - rng.random::<f64>()).ln()
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            if total > 0.0 {
                break raw.iter().map(|v| v / total).collect();
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_gridworld;

    #[test]
    fn cycle_occupancy() {
        let mdp = TabularMDP::new(2, 1, vec![vec![(1, 1.0)], vec![(0, 1.0)]], 0, 0.5, 10).unwrap();
        let d = exact_occupancy(&mdp, &vec![vec![1.0]; 2]).unwrap();
        assert!((d.probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn self_loop_and_tiny_gamma() {
        let mdp = TabularMDP::new(1, 1, vec![vec![(0, 1.0)]], 0, 0.9, 10).unwrap();
        assert_eq!(exact_occupancy(&mdp, &vec![vec![1.0]]).unwrap().probs, vec![1.0]);
        let g = build_gridworld(3).unwrap();
        let uniform = vec![vec![0.25; 4]; 9];
        let d = exact_occupancy_with_gamma(&g, &uniform, 1e-9).unwrap();
        assert!((d.probs[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_stochastic_policy_rejected() {
        let g = build_gridworld(2).unwrap();
        assert!(exact_occupancy(&g, &vec![vec![0.5; 4]; 4]).is_err());
    }

    #[test]
    fn identical_and_disjoint() {
        let same = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(i_sd3_exact(&same, 1.0).unwrap().abs() < 1e-15);
        assert!(mi_exact(&same).unwrap().abs() < 1e-15);
        let disjoint = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((i_sd3_exact(&disjoint, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((mi_exact(&disjoint).unwrap() - 2f64.ln()).abs() < 1e-15);
        // Disjoint supports: I_SD3 does not depend on λ, so the lower bound is
        // tight and the upper margin is log λ.
        let r = verify_theorem1(&disjoint, &[3.0]).unwrap();
        assert!(r.rows[0].lower_margin.abs() < 1e-15);
        assert!((r.rows[0].upper_margin - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lambda_grid_must_start_at_one() {
        let occ = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        assert!(verify_theorem1(&occ, &[0.5]).is_err());
        let r = verify_theorem1(&occ, &[1.0]).unwrap();
        assert!(r.rows[0].lower_margin.abs() < 1e-12);
        assert!(r.rows[0].upper_margin.abs() < 1e-12);
    }
}
