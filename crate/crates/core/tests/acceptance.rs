//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `SD3_ACCEPTANCE_ONLY=1,5,9` restricts the run to some criteria and
//! `SD3_ACCEPTANCE_STRICT=1` turns any failure into a non-zero exit.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sd3::agent::{
    finetune_goal, mean_goal_return, pretrain, skill_report, Checkpoint, EnvKind, Environment, GoalTask, Method,
    Policy, PretrainConfig, SkillReport,
};
use sd3::analysis::{
    elbo_fidelity, theorem1_sweep, verify_gram_identities, verify_sd3_gradient, verify_theorem2_run, FidelityConfig,
    GramOracle, SyntheticTask, Theorem2Options, GRAM_TOL,
};
use sd3::io::jsonl_string;
use sd3::parallel::Execution;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const REPORT_EPISODES: usize = 10;

struct Verdict {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct MazeRun {
    report: SkillReport,
    checkpoint: Checkpoint,
}

/// Maze runs shared between criteria, keyed by (method, lambda, alpha, seed).
#[derive(Default)]
struct MazeRuns {
    runs: BTreeMap<(u8, u64, u64, u64), MazeRun>,
}

impl MazeRuns {
    fn get(&mut self, method: Method, lambda: f64, alpha: f64, seed: u64) -> Result<&MazeRun, String> {
        let key = (method as u8, lambda.to_bits(), alpha.to_bits(), seed);
        if let Entry::Vacant(slot) = self.runs.entry(key) {
            let mut cfg = PretrainConfig::u_maze_desk();
            cfg.method = method;
            cfg.seed = seed;
            cfg.rewards.lambda = lambda;
            cfg.rewards.alpha = alpha;
            let t = Instant::now();
            let r = pretrain(&cfg, Execution::default()).map_err(err)?;
            let (report, _) = skill_report(&r.checkpoint, &r.metrics, REPORT_EPISODES).map_err(err)?;
            eprintln!(
                "  run {method:?} lambda={lambda} alpha={alpha} seed={seed}: coverage {:.4} accuracy {:.3} ({:.0} s)",
                report.coverage,
                report.accuracy,
                t.elapsed().as_secs_f64()
            );
            slot.insert(MazeRun {
                report,
                checkpoint: r.checkpoint,
            });
        }
        Ok(&self.runs[&key])
    }

    fn reports(&mut self, method: Method, lambda: f64, alpha: f64) -> Result<Vec<SkillReport>, String> {
        SEEDS
            .iter()
            .map(|&s| self.get(method, lambda, alpha, s).map(|r| r.report.clone()))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn theorem1() -> Outcome {
    let t = Instant::now();
    let r = theorem1_sweep(1000, &[1.0, 1.5, 2.0, 3.0], 0, Execution::default()).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = r.violations == 0 && r.max_lambda_one_gap <= 1e-12 && secs < 60.0;
    Ok((
        ok,
        format!(
            "{} tuples, {} violations, min lower margin {:.2e}, min upper margin {:.2e}, lambda=1 gap {:.2e}, {secs:.1} s",
            r.tuples, r.violations, r.min_lower_margin, r.min_upper_margin, r.max_lambda_one_gap
        ),
    ))
}

fn gradient() -> Outcome {
    let r = verify_sd3_gradient(100, 0).map_err(err)?;
    Ok((
        r.max_relative_error < 1e-6,
        format!(
            "max relative error {:.2e} over {} points",
            r.max_relative_error, r.points
        ),
    ))
}

fn grid_config() -> PretrainConfig {
    PretrainConfig {
        env: EnvKind::Gridworld { side: 5 },
        n_skills: 5,
        total_steps: 100_000,
        one_hot_states: true,
        kappa: 1.0,
        log_every: 10_000,
        ..PretrainConfig::default()
    }
}

fn gram_oracle(ckpt: &Checkpoint) -> Outcome {
    let counts = ckpt.counts.as_ref().ok_or("run kept no visit counts")?;
    let t = Instant::now();
    let mut visits = Vec::new();
    for (s, z) in counts.visited() {
        visits.extend(std::iter::repeat_n((s, z), counts.count(s, z) as usize));
    }
    let oracle = GramOracle::from_visits(counts.n_states, counts.n_skills, counts.kappa, &visits).map_err(err)?;
    let pairs: Vec<(usize, usize)> = (0..counts.n_states)
        .flat_map(|s| (0..counts.n_skills).map(move |z| (s, z)))
        .collect();
    let r = verify_gram_identities(&oracle, &pairs).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = r.max_bonus_error <= GRAM_TOL && r.info_gain_bound_holds && secs < 60.0;
    Ok((
        ok,
        format!(
            "{} (s,z) pairs from {} visits, max |bonus - 1/(N+k)| {:.2e}, info-gain bound {}, {secs:.1} s",
            r.pairs.len(),
            visits.len(),
            r.max_bonus_error,
            if r.info_gain_bound_holds { "holds" } else { "violated" }
        ),
    ))
}

fn count_correlation(ckpt: &Checkpoint, started: Instant) -> Outcome {
    let r = verify_theorem2_run(ckpt, &Theorem2Options::default()).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    let ok = r.correlation.spearman >= 0.8 && secs < 1800.0;
    Ok((
        ok,
        format!(
            "Spearman {:.4} over {} visited pairs ({} distinct counts), fit loss {:.3}, {secs:.0} s",
            r.correlation.spearman, r.correlation.pairs, r.correlation.distinct_counts, r.fit_loss
        ),
    ))
}

fn elbo() -> Outcome {
    let t = Instant::now();
    let task = SyntheticTask::two_skills(0.2, 0.1);
    let r = elbo_fidelity(&task, &FidelityConfig::default(), 0, Execution::default()).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = r.elbo_error.iter().all(|e| *e <= 1.0) && r.sign_agreement >= 0.95 && secs < 600.0;
    Ok((
        ok,
        format!(
            "mean ELBO {} vs true {:.4} (errors {}), sign agreement {:.3}, {secs:.0} s",
            fmt(&r.mean_elbo),
            r.true_mean_log_density,
            fmt(&r.elbo_error),
            r.sign_agreement
        ),
    ))
}

fn coverage(rs: &[SkillReport]) -> Vec<f64> {
    rs.iter().map(|r| r.coverage).collect()
}

fn accuracy(rs: &[SkillReport]) -> Vec<f64> {
    rs.iter().map(|r| r.accuracy).collect()
}

fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x > y).count()
}

fn maze_quality(runs: &mut MazeRuns) -> Outcome {
    let sd3 = runs.reports(Method::Sd3, 1.5, 0.04)?;
    let diayn = runs.reports(Method::Diayn, 1.5, 0.04)?;
    let (cs, cd) = (coverage(&sd3), coverage(&diayn));
    let acc = accuracy(&sd3);
    let w = wins(&cs, &cd);
    let ok = w >= 4 && acc.iter().all(|a| *a >= 0.3);
    Ok((
        ok,
        format!(
            "SD3 coverage {} vs DIAYN {} (SD3 higher on {w}/5); SD3 accuracy {}",
            fmt(&cs),
            fmt(&cd),
            fmt(&acc)
        ),
    ))
}

fn alpha_ablation(runs: &mut MazeRuns) -> Outcome {
    let with = runs.reports(Method::Sd3, 1.5, 0.04)?;
    let without = runs.reports(Method::Sd3, 1.5, 0.0)?;
    let w = wins(&coverage(&with), &coverage(&without));
    let acc0 = accuracy(&without);
    let ok = w >= 4 && acc0.iter().all(|a| *a >= 0.2);
    Ok((
        ok,
        format!(
            "coverage alpha=0.04 {} vs alpha=0 {} (higher on {w}/5); alpha=0 accuracy {}",
            fmt(&coverage(&with)),
            fmt(&coverage(&without)),
            fmt(&acc0)
        ),
    ))
}

fn relative_spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

fn lambda_ablation(runs: &mut MazeRuns) -> Outcome {
    let mut cov = Vec::new();
    let mut acc = Vec::new();
    for lambda in [1.5, 2.0, 3.0] {
        let rs = runs.reports(Method::Sd3, lambda, 0.04)?;
        cov.push(mean(&coverage(&rs)));
        acc.push(mean(&accuracy(&rs)));
    }
    let low = runs.reports(Method::Sd3, 0.5, 0.04)?;
    let (vc, va) = (relative_spread(&cov), relative_spread(&acc));
    Ok((
        vc < 0.25 && va < 0.25,
        format!(
            "lambda 1.5/2/3 mean coverage {} (variation {:.1}%), mean accuracy {} (variation {:.1}%); lambda=0.5 reported only: coverage {:.3}, accuracy {:.3}",
            fmt(&cov),
            100.0 * vc,
            fmt(&acc),
            100.0 * va,
            mean(&coverage(&low)),
            mean(&accuracy(&low))
        ),
    ))
}

fn softmod() -> Outcome {
    let task = SyntheticTask::two_skills(0.5, 0.1);
    let mut errs = [Vec::new(), Vec::new()];
    for (i, soft) in [true, false].into_iter().enumerate() {
        for seed in SEEDS {
            let mut cfg = FidelityConfig::default();
            cfg.cvae.soft_modularization = soft;
            let r = elbo_fidelity(&task, &cfg, seed, Execution::default()).map_err(err)?;
            errs[i].push(mean(&r.elbo_error));
        }
    }
    let (on, off) = (mean(&errs[0]), mean(&errs[1]));
    Ok((
        on <= off,
        format!(
            "mean per-skill ELBO error with soft modularization {on:.4} {}, without {off:.4} {}",
            fmt(&errs[0]),
            fmt(&errs[1])
        ),
    ))
}

fn determinism() -> Outcome {
    let mut maze = PretrainConfig::u_maze_desk();
    maze.total_steps = 20_000;
    maze.warmup_steps = 2_000;
    let grid = PretrainConfig {
        total_steps: 20_000,
        log_every: 5_000,
        ..grid_config()
    };
    let mut lines = Vec::new();
    for cfg in [maze, grid] {
        let a = pretrain(&cfg, Execution::Parallel).map_err(err)?;
        let b = pretrain(&cfg, Execution::Parallel).map_err(err)?;
        let c = pretrain(&cfg, Execution::Sequential).map_err(err)?;
        let ja = jsonl_string(&a.metrics).map_err(err)?;
        let jb = jsonl_string(&b.metrics).map_err(err)?;
        let jc = jsonl_string(&c.metrics).map_err(err)?;
        lines.push((cfg.env.name(), a.metrics.len(), ja == jb, ja == jc));
    }
    let ok = lines.iter().all(|l| l.1 > 0 && l.2 && l.3);
    let detail = lines
        .iter()
        .map(|(env, n, rep, seq)| format!("{env}: {n} records, repeat identical {rep}, sequential identical {seq}"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, detail))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn regress_meta(runs: &mut MazeRuns) -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    let mut improved = 0;
    for seed in SEEDS {
        let run = runs.get(Method::Sd3, 1.5, 0.04, seed)?;
        let Policy::ActorCritic(ac) = &run.checkpoint.policy else {
            return Err("maze run without an actor-critic".into());
        };
        let Environment::Maze(spec) = run.checkpoint.config.env.build().map_err(err)? else {
            return Err("maze run on a non-maze environment".into());
        };
        let task = GoalTask {
            goal: [-0.8, 0.8],
            episode_len: spec.episode_len,
        };
        let noise = run.checkpoint.config.eval_noise;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let returns: Vec<f64> = (0..ac.n_skills)
            .map(|z| mean_goal_return(&spec, ac, &task, z, REPORT_EPISODES * task.episode_len, noise, &mut rng))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let mut tuned = ac.clone();
        let rep = finetune_goal(
            &spec,
            &mut tuned,
            &task,
            10_000,
            20_000,
            REPORT_EPISODES,
            noise,
            64,
            seed,
        )
        .map_err(err)?;
        let chosen = returns[rep.selection.selected];
        let med = median(&returns);
        if chosen >= med {
            hits += 1;
        }
        let post = rep.post_return.unwrap_or(f64::NAN);
        if post >= rep.pre_return {
            improved += 1;
        }
        notes.push(format!(
            "seed {seed}: skill {} return {chosen:.1} vs median {med:.1} (fine-tune {:.1} -> {post:.1})",
            rep.selection.selected, rep.pre_return
        ));
    }
    Ok((
        hits >= 4,
        format!(
            "selected >= median on {hits}/5; fine-tuning improved {improved}/5 (reported only); {}",
            notes.join("; ")
        ),
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SD3_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("SD3_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));

    let mut verdicts = Vec::new();
    let mut run = |id: u32, title: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let (passed, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let v = Verdict {
            id,
            title,
            passed,
            detail,
            elapsed: t.elapsed(),
        };
        println!(
            "[{}] {:>2} {}: {} ({:.1} s)",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.title,
            v.detail,
            v.elapsed.as_secs_f64()
        );
        verdicts.push(v);
    };

    run(1, "deviation sandwich bound", &mut theorem1);
    run(2, "analytic deviation gradient", &mut gradient);

    let mut grid: Option<(Checkpoint, Instant)> = None;
    if wanted(3) || wanted(4) {
        let started = Instant::now();
        match pretrain(&grid_config(), Execution::default()) {
            Ok(r) => grid = Some((r.checkpoint, started)),
            Err(e) => eprintln!("gridworld pretraining failed: {e}"),
        }
    }
    run(3, "Gram-matrix oracle", &mut || match &grid {
        Some((c, _)) => gram_oracle(c),
        None => Err("no gridworld run".into()),
    });
    run(4, "count / latent-KL rank correlation", &mut || match &grid {
        Some((c, t)) => count_correlation(c, *t),
        None => Err("no gridworld run".into()),
    });
    run(5, "ELBO fidelity", &mut elbo);

    let mut maze = MazeRuns::default();
    run(6, "U-maze skill quality vs DIAYN", &mut || maze_quality(&mut maze));
    run(7, "alpha ablation", &mut || alpha_ablation(&mut maze));
    run(8, "lambda insensitivity", &mut || lambda_ablation(&mut maze));
    run(9, "soft-modularization ablation", &mut softmod);
    run(10, "determinism", &mut determinism);
    run(11, "regress-meta selection", &mut || regress_meta(&mut maze));

    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!("acceptance: {passed}/{} criteria passed", verdicts.len());
    if strict && passed < verdicts.len() {
        std::process::exit(1);
    }
}
