use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, Sd3Error};

/// Exact visitation counts `N(s, z)` with the Gram regulariser `κ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub n_states: usize,
    pub n_skills: usize,
    pub kappa: f64,
    counts: Vec<u64>,
}

impl CountTable {
    pub fn new(n_states: usize, n_skills: usize, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(contract("kappa must be positive"));
        }
        Ok(Self {
            n_states,
            n_skills,
            kappa,
            counts: vec![0; n_states * n_skills],
        })
    }

    pub fn record(&mut self, s: usize, z: usize) -> Result<()> {
        if s >= self.n_states || z >= self.n_skills {
            return Err(contract(format!("count index ({s}, {z}) out of range")));
        }
        self.counts[s * self.n_skills + z] += 1;
        Ok(())
    }

    pub fn count(&self, s: usize, z: usize) -> u64 {
        self.counts[s * self.n_skills + z]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// All `(s, z)` pairs with a positive count.
    pub fn visited(&self) -> Vec<(usize, usize)> {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_skills).map(move |z| (s, z)))
            .filter(|&(s, z)| self.count(s, z) > 0)
            .collect()
    }

    /// Feature index of the one-hot `η(s, z)`.
    pub fn feature_index(&self, s: usize, z: usize) -> usize {
        s * self.n_skills + z
    }
}

/// Regularised Gram matrix `Λ = Σ η ηᵀ + κ I` over one-hot features, built
/// explicitly from the visit stream and factorised once.
pub struct GramOracle {
    pub table: CountTable,
    /// Output dimension used in the information gain, `|S|` here.
    pub c: usize,
    lambda: DMatrix<f64>,
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl GramOracle {
    /// Accumulates one sparse outer product per visit.
    pub fn from_visits(n_states: usize, n_skills: usize, kappa: f64, visits: &[(usize, usize)]) -> Result<Self> {
        let mut table = CountTable::new(n_states, n_skills, kappa)?;
        let dim = n_states * n_skills;
        let mut lambda = DMatrix::<f64>::identity(dim, dim) * kappa;
        for &(s, z) in visits {
            table.record(s, z)?;
            let eta = [(table.feature_index(s, z), 1.0)];
            for &(i, a) in &eta {
                for &(j, b) in &eta {
                    lambda[(i, j)] += a * b;
                }
            }
        }
        let cholesky = lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Sd3Error::Verification("Gram matrix is not positive definite".into()))?;
        Ok(Self {
            table,
            c: n_states,
            lambda,
            cholesky,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn diagonal(&self, s: usize, z: usize) -> f64 {
        let i = self.table.feature_index(s, z);
        self.lambda[(i, i)]
    }

    /// `ηᵀ Λ⁻¹ η` by an explicit solve.
    pub fn gram_bonus_solved(&self, s: usize, z: usize) -> f64 {
        let mut eta = DVector::<f64>::zeros(self.dim());
        eta[self.table.feature_index(s, z)] = 1.0;
        let x = self.cholesky.solve(&eta);
        eta.dot(&x)
    }

    /// Closed form `1 / (N(s, z) + κ)`.
    pub fn gram_bonus_closed(&self, s: usize, z: usize) -> f64 {
        1.0 / (self.table.count(s, z) as f64 + self.table.kappa)
    }
}

/// Tolerance between the solved and closed-form bonus.
pub const GRAM_TOL: f64 = 1e-10;

/// Bonus by explicit solve, checked against the closed form.
pub fn gram_bonus(oracle: &GramOracle, s: usize, z: usize) -> Result<f64> {
    if s >= oracle.table.n_states || z >= oracle.table.n_skills {
        return Err(contract(format!("pair ({s}, {z}) out of range")));
    }
    let solved = oracle.gram_bonus_solved(s, z);
    let closed = oracle.gram_bonus_closed(s, z);
    if (solved - closed).abs() > GRAM_TOL {
        return Err(Sd3Error::Verification(format!(
            "bonus mismatch at ({s}, {z}): solve {solved}, closed form {closed}"
        )));
    }
    Ok(solved)
}

/// `(c / 2) log(1 + ηᵀ Λ⁻¹ η)`.
pub fn info_gain(oracle: &GramOracle, s: usize, z: usize) -> Result<f64> {
    let b = gram_bonus(oracle, s, z)?;
    Ok(oracle.c as f64 / 2.0 * b.ln_1p())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramPairRow {
    pub state: usize,
    pub skill: usize,
    pub count: u64,
    pub bonus_solved: f64,
    pub bonus_closed: f64,
    pub info_gain: f64,
    pub count_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub pairs: Vec<GramPairRow>,
    pub max_bonus_error: f64,
    pub info_gain_bound_holds: bool,
}

/// Checks the bonus identity and `info_gain ≤ (c/2)·bonus` for every pair.
pub fn verify_gram_identities(oracle: &GramOracle, pairs: &[(usize, usize)]) -> Result<GramReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut max_err: f64 = 0.0;
    let mut bound_ok = true;
    for &(s, z) in pairs {
        let solved = oracle.gram_bonus_solved(s, z);
        let closed = oracle.gram_bonus_closed(s, z);
        max_err = max_err.max((solved - closed).abs());
        let gain = info_gain(oracle, s, z)?;
        let bound = oracle.c as f64 / 2.0 * solved;
        bound_ok &= gain <= bound;
        rows.push(GramPairRow {
            state: s,
            skill: z,
            count: oracle.table.count(s, z),
            bonus_solved: solved,
            bonus_closed: closed,
            info_gain: gain,
            count_bound: bound,
        });
    }
    Ok(GramReport {
        pairs: rows,
        max_bonus_error: max_err,
        info_gain_bound_holds: bound_ok,
    })
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). Zero when either
/// side has no variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(contract("spearman needs two equally long samples of size >= 2"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRewardRow {
    pub state: usize,
    pub skill: usize,
    pub count: u64,
    pub inverse_count: f64,
    pub r_exp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub spearman: f64,
    pub pairs: usize,
    pub distinct_counts: usize,
    pub table: Vec<CountRewardRow>,
}

/// Rank correlation between `r_exp(s, z)` and `1 / (N(s, z) + κ)` over the
/// visited pairs. `r_exp` is called once per visited pair.
pub fn verify_theorem2<F>(counts: &CountTable, mut r_exp: F) -> Result<Theorem2Report>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let pairs = counts.visited();
    let mut distinct: Vec<u64> = pairs.iter().map(|&(s, z)| counts.count(s, z)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 10 {
        return Err(Sd3Error::InsufficientData(format!(
            "only {} distinct visitation counts (need 10)",
            distinct.len()
        )));
    }
    let mut table = Vec::with_capacity(pairs.len());
    for &(s, z) in &pairs {
        let count = counts.count(s, z);
        table.push(CountRewardRow {
            state: s,
            skill: z,
            count,
            inverse_count: 1.0 / (count as f64 + counts.kappa),
            r_exp: r_exp(s, z)?,
        });
    }
    let inv: Vec<f64> = table.iter().map(|r| r.inverse_count).collect();
    let rew: Vec<f64> = table.iter().map(|r| r.r_exp).collect();
    Ok(Theorem2Report {
        spearman: spearman(&rew, &inv)?,
        pairs: table.len(),
        distinct_counts: distinct.len(),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonus_examples() {
        let visits = vec![(3, 1); 4];
        let o = GramOracle::from_visits(25, 2, 1.0, &visits).unwrap();
        assert!((gram_bonus(&o, 0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((gram_bonus(&o, 3, 1).unwrap() - 0.2).abs() < 1e-12);
        // 12.5 ln 1.2
        assert!((info_gain(&o, 3, 1).unwrap() - 2.279_019_459_924_432).abs() < 1e-12);
        assert_eq!(o.diagonal(3, 1), 5.0);
        assert!((o.c as f64 / 2.0 * gram_bonus(&o, 0, 0).unwrap() - 12.5).abs() < 1e-12);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn too_few_distinct_counts() {
        let mut t = CountTable::new(4, 1, 1.0).unwrap();
        for s in 0..4 {
            t.record(s, 0).unwrap();
        }
        let err = verify_theorem2(&t, |_, _| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Sd3Error::InsufficientData(_)));
    }
}
