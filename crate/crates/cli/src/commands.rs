use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sd3::agent::{
    finetune_goal, pretrain, skill_report, AdaptReport, Checkpoint, Environment, GoalTask, MetricsRecord, Policy,
    SkillReport,
};
use sd3::analysis::{elbo_fidelity, theorem1_sweep, verify_sd3_gradient, verify_theorem2_run, SyntheticTask, GRAM_TOL};
use sd3::io::{jsonl_string, write_atomic, write_json};
use sd3::parallel::Execution;
use sd3::Sd3Error;

use crate::artifacts::{occupancy_csv, skills_svg, trajectories_csv};
use crate::config::RunConfig;

pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.jsonl";

/// Pass/fail of a verification suite; errors are reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// `dir` itself if it holds a checkpoint, else `dir/seed_<seed>`.
pub fn locate_run(dir: &Path, seed: u64) -> Result<PathBuf> {
    if dir.join(CHECKPOINT).exists() {
        return Ok(dir.to_path_buf());
    }
    let nested = seed_dir(dir, seed);
    if nested.join(CHECKPOINT).exists() {
        return Ok(nested);
    }
    Err(Sd3Error::MissingArtifact(dir.join(CHECKPOINT)).into())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad metrics line in {}", path.display())))
        .collect()
}

/// Evaluation rollouts of a finished run rendered to the standard artifacts.
pub fn write_exports(dir: &Path, ckpt: &Checkpoint, metrics: &[MetricsRecord], episodes: usize) -> Result<SkillReport> {
    let (report, rollouts) = skill_report(ckpt, metrics, episodes)?;
    let env = ckpt.config.env.build()?;
    let seed = ckpt.config.seed;
    write_atomic(
        &dir.join("trajectories.csv"),
        trajectories_csv(&env, &rollouts, seed)?.as_bytes(),
    )?;
    write_atomic(
        &dir.join("occupancy.csv"),
        occupancy_csv(&env, &rollouts, ckpt.config.coverage_resolution)?.as_bytes(),
    )?;
    write_atomic(
        &dir.join("skills.svg"),
        skills_svg(&env, &rollouts, ckpt.config.n_skills).as_bytes(),
    )?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// One pretraining run written to `dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SkillReport> {
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = seed;
    let resolved = pcfg.resolved()?;
    for w in resolved.rewards.warnings() {
        eprintln!("warning: {w}");
    }
    let mut used = cfg.clone();
    used.pretrain = resolved.clone();
    used.seeds = vec![seed];
    write_json(&dir.join("resolved_config.json"), &used)?;

    let result = pretrain(&resolved, Execution::default()).with_context(|| format!("pretraining seed {seed}"))?;
    result.checkpoint.save(&dir.join(CHECKPOINT))?;
    write_atomic(&dir.join(METRICS), jsonl_string(&result.metrics)?.as_bytes())?;
    write_exports(dir, &result.checkpoint, &result.metrics, cfg.report_episodes)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<SkillReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let r = run_seed(cfg, seed, &dir)?;
        println!(
            "seed {seed}: coverage {:.4} accuracy {:.3} spread {:.3} -> {}",
            r.coverage,
            r.accuracy,
            r.endpoint_spread,
            dir.display()
        );
        reports.push(r);
    }
    Ok(reports)
}

pub fn cmd_export(cfg: &RunConfig) -> Result<SkillReport> {
    let dir = locate_run(&cfg.output_dir, cfg.seeds[0])?;
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
    let metrics_path = dir.join(METRICS);
    let metrics = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    let r = write_exports(&dir, &ckpt, &metrics, cfg.report_episodes)?;
    println!(
        "exported {} (coverage {:.4}, accuracy {:.3})",
        dir.display(),
        r.coverage,
        r.accuracy
    );
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Thm1,
    Thm2,
    Grad,
    Elbo,
}

#[derive(Serialize)]
struct VerifyReport<T: Serialize> {
    suite: String,
    passed: bool,
    checks: Vec<(String, bool)>,
    details: T,
}

fn finish<T: Serialize>(path: &Path, suite: &str, checks: Vec<(String, bool)>, details: T) -> Result<Outcome> {
    let passed = checks.iter().all(|c| c.1);
    for (name, ok) in &checks {
        println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    write_json(
        path,
        &VerifyReport {
            suite: suite.to_string(),
            passed,
            checks,
            details,
        },
    )?;
    println!("report written to {}", path.display());
    Ok(Outcome::from_bool(passed))
}

pub fn cmd_verify(cfg: &RunConfig, suite: Suite) -> Result<Outcome> {
    let v = &cfg.verify;
    let out = |name: &str| cfg.output_dir.join(format!("verify_{name}.json"));
    match suite {
        Suite::Thm1 => {
            let r = theorem1_sweep(v.theorem1_tuples, &v.lambdas, v.seed, Execution::default())?;
            println!(
                "{} tuples, min lower margin {:.3e}, min upper margin {:.3e}, lambda=1 gap {:.3e}",
                r.tuples, r.min_lower_margin, r.min_upper_margin, r.max_lambda_one_gap
            );
            let checks = vec![
                (format!("sandwich holds on all {} tuples", r.tuples), r.violations == 0),
                (
                    "lambda = 1 equals I(S;Z) within 1e-12".to_string(),
                    r.max_lambda_one_gap <= 1e-12,
                ),
            ];
            finish(&out("thm1"), "thm1", checks, r)
        }
        Suite::Grad => {
            let r = verify_sd3_gradient(v.gradient_points, v.seed)?;
            println!(
                "max relative error {:.3e} over {} points",
                r.max_relative_error, r.points
            );
            let checks = vec![("relative error < 1e-6".to_string(), r.max_relative_error < 1e-6)];
            finish(&out("grad"), "grad", checks, r)
        }
        Suite::Elbo => {
            let task = SyntheticTask::two_skills(v.fidelity_offset, v.fidelity_sigma);
            let r = elbo_fidelity(&task, &v.fidelity, v.seed, Execution::default())?;
            println!(
                "mean ELBO {:?} vs true {:.4}, sign agreement {:.3}",
                r.mean_elbo, r.true_mean_log_density, r.sign_agreement
            );
            let checks = vec![
                (
                    "per-skill ELBO within 1 nat".to_string(),
                    r.elbo_error.iter().all(|e| *e <= 1.0),
                ),
                ("reward sign agreement >= 0.95".to_string(), r.sign_agreement >= 0.95),
            ];
            finish(&out("elbo"), "elbo", checks, r)
        }
        Suite::Thm2 => {
            let dir = locate_run(&cfg.output_dir, cfg.seeds[0])?;
            let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
            let r = verify_theorem2_run(&ckpt, &v.theorem2)?;
            println!(
                "gram error {:.3e} over {} pairs, spearman {:.4} over {} visited pairs",
                r.gram.max_bonus_error, r.gram.pairs_checked, r.correlation.spearman, r.correlation.pairs
            );
            let checks = vec![
                (
                    "gram bonus matches 1/(N+kappa)".to_string(),
                    r.gram.max_bonus_error <= GRAM_TOL,
                ),
                ("info gain bound holds".to_string(), r.gram.info_gain_bound_holds),
                ("spearman >= 0.8".to_string(), r.correlation.spearman >= 0.8),
            ];
            finish(&dir.join("verify_thm2.json"), "thm2", checks, r)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Parameter {
    Lambda,
    Alpha,
    Softmod,
}

impl Parameter {
    pub fn settings(self) -> Vec<f64> {
        match self {
            Parameter::Lambda => vec![0.5, 1.0, 1.5, 2.0, 3.0],
            Parameter::Alpha => vec![0.0, 0.02, 0.04, 0.08],
            Parameter::Softmod => vec![1.0, 0.0],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Parameter::Lambda => "lambda",
            Parameter::Alpha => "alpha",
            Parameter::Softmod => "softmod",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            Parameter::Lambda => cfg.pretrain.rewards.lambda = value,
            Parameter::Alpha => cfg.pretrain.rewards.alpha = value,
            Parameter::Softmod => cfg.pretrain.cvae.soft_modularization = value != 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub coverage: f64,
    pub accuracy: f64,
    pub endpoint_spread: f64,
    pub final_elbo: Option<f64>,
}

pub fn cmd_ablate(cfg: &RunConfig, param: Parameter) -> Result<Vec<AblationRow>> {
    let root = cfg.output_dir.join(format!("ablate_{}", param.name()));
    let mut rows = Vec::new();
    println!(
        "{:>8} {:>6} {:>5} {:>9} {:>9} {:>8} {:>10}",
        param.name(),
        "",
        "seed",
        "coverage",
        "accuracy",
        "spread",
        "elbo"
    );
    for value in param.settings() {
        let mut cell = cfg.clone();
        param.apply(&mut cell, value);
        for &seed in &cfg.seeds {
            let dir = seed_dir(&root.join(format!("{}_{value}", param.name())), seed);
            let r = run_seed(&cell, seed, &dir)?;
            println!(
                "{value:>8} {:>6} {seed:>5} {:>9.4} {:>9.3} {:>8.3} {:>10}",
                "",
                r.coverage,
                r.accuracy,
                r.endpoint_spread,
                r.final_elbo.map_or("-".to_string(), |e| format!("{e:.3}"))
            );
            rows.push(AblationRow {
                parameter: param.name().to_string(),
                value,
                seed,
                coverage: r.coverage,
                accuracy: r.accuracy,
                endpoint_spread: r.endpoint_spread,
                final_elbo: r.final_elbo,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_atomic(&root.join("table.csv"), &w.into_inner()?)?;
    write_json(&root.join("report.json"), &rows)?;
    Ok(rows)
}

pub fn cmd_adapt(cfg: &RunConfig) -> Result<AdaptReport> {
    let dir = locate_run(&cfg.output_dir, cfg.seeds[0])?;
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
    let Environment::Maze(spec) = ckpt.config.env.build()? else {
        bail!("adaptation needs a maze run, found {}", ckpt.config.env.name());
    };
    let Policy::ActorCritic(mut ac) = ckpt.policy.clone() else {
        bail!("checkpoint does not hold an actor-critic policy");
    };
    let a = &cfg.adapt;
    let task = GoalTask {
        goal: a.goal,
        episode_len: a.episode_len.unwrap_or(spec.episode_len),
    };
    let report = finetune_goal(
        &spec,
        &mut ac,
        &task,
        a.selection_budget,
        a.finetune_steps,
        a.eval_episodes,
        ckpt.config.eval_noise,
        a.batch_size,
        a.seed,
    )?;
    println!(
        "selected skill {} (pre-return {:.2}{})",
        report.selection.selected,
        report.pre_return,
        report
            .post_return
            .map_or(String::new(), |p| format!(", post-return {p:.2}"))
    );
    write_json(&dir.join("adapt.json"), &report)?;
    Ok(report)
}
