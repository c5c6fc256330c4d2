//! Exact oracles and verification: occupancies, information quantities,
//! the count/Gram-matrix oracle, skill-quality metrics and skill selection.

mod fidelity;
mod gram;
mod pipeline;
mod skills;
mod theorems;

pub use fidelity::{
    elbo_fidelity, theorem1_sweep, verify_sd3_gradient, FidelityConfig, FidelityReport, GradientReport, SyntheticTask,
    Theorem1SweepReport,
};
pub use gram::{
    average_ranks, gram_bonus, info_gain, spearman, verify_gram_identities, verify_theorem2, CountRewardRow,
    CountTable, GramOracle, GramPairRow, GramReport, Theorem2Report, GRAM_TOL,
};
pub use pipeline::{verify_theorem2_run, GramSummary, Theorem2Options, Theorem2RunReport};
pub use skills::{
    diayn_reward, diayn_reward_from_log_prob, regress_meta_select, skill_discriminability, DiscriminabilityReport,
    Discriminator, RegressMetaReport, DISCRIMINABILITY_FOLDS,
};
pub use theorems::{
    exact_occupancy, exact_occupancy_with_gamma, i_sd3_exact, mi_exact, random_occupancies, verify_theorem1,
    OccupancyVector, StochasticPolicy, Theorem1Report, Theorem1Row, DIRECT_SOLVE_MAX_STATES, THEOREM1_TOL,
};
