use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{fit_cvae, grid_feature_batch, Checkpoint, EnvKind, Environment};
use crate::error::{Result, Sd3Error};

use super::gram::{verify_gram_identities, verify_theorem2, CountTable, GramOracle, Theorem2Report};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem2Options {
    /// Extra CVAE steps on the final buffer before measuring `r_exp`.
    pub fit_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Theorem2Options {
    fn default() -> Self {
        Self {
            fit_steps: 20_000,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub pairs_checked: usize,
    pub max_bonus_error: f64,
    pub info_gain_bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2RunReport {
    pub gram: GramSummary,
    pub correlation: Theorem2Report,
    pub fit_loss: f64,
}

fn expand(counts: &CountTable) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(counts.total() as usize);
    for (s, z) in counts.visited() {
        out.extend(std::iter::repeat_n((s, z), counts.count(s, z) as usize));
    }
    out
}

/// Gram-matrix identities and the count/reward rank correlation for a
/// finished one-hot gridworld SD3 run.
pub fn verify_theorem2_run(ckpt: &Checkpoint, opts: &Theorem2Options) -> Result<Theorem2RunReport> {
    let needs = || Sd3Error::Config("count analysis needs a one-hot gridworld SD3 run".into());
    if !matches!(ckpt.config.env, EnvKind::Gridworld { .. }) || !ckpt.config.one_hot_states {
        return Err(needs());
    }
    let Environment::Grid(mdp) = ckpt.config.env.build()? else {
        return Err(needs());
    };
    let mut cvae = ckpt.cvae.clone().ok_or_else(needs)?;
    let counts = ckpt.counts.as_ref().ok_or_else(needs)?;
    let buffer_counts = ckpt.buffer_counts.as_ref().ok_or_else(needs)?;

    let visits = expand(counts);
    let oracle = GramOracle::from_visits(counts.n_states, counts.n_skills, counts.kappa, &visits)?;
    let all_pairs: Vec<(usize, usize)> = (0..counts.n_states)
        .flat_map(|s| (0..counts.n_skills).map(move |z| (s, z)))
        .collect();
    let gram = verify_gram_identities(&oracle, &all_pairs)?;

    let data = expand(buffer_counts);
    if data.is_empty() {
        return Err(Sd3Error::InsufficientData("the final buffer is empty".into()));
    }
    let states: Vec<usize> = data.iter().map(|p| p.0).collect();
    let skills: Vec<usize> = data.iter().map(|p| p.1).collect();
    let features = grid_feature_batch(&mdp, &states, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = cvae.new_optimizer();
    let fit_loss = if opts.fit_steps > 0 {
        fit_cvae(
            &mut cvae,
            &mut opt,
            &features,
            &skills,
            opts.fit_steps,
            opts.batch_size,
            &mut rng,
        )?
    } else {
        f64::NAN
    };

    let correlation = verify_theorem2(counts, |s, z| {
        let x = grid_feature_batch(&mdp, &[s], true)?;
        Ok(cvae.kl_batch(&x, &[z])?[0])
    })?;
    Ok(Theorem2RunReport {
        gram: GramSummary {
            pairs_checked: gram.pairs.len(),
            max_bonus_error: gram.max_bonus_error,
            info_gain_bound_holds: gram.info_gain_bound_holds,
        },
        correlation,
        fit_loss,
    })
}
