use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sd3::agent::PretrainConfig;
use sd3::analysis::{FidelityConfig, Theorem2Options};
use sd3::env::Point;

/// Everything one invocation needs; read from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pretrain: PretrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Evaluation episodes per skill behind the end-of-run report and exports.
    pub report_episodes: usize,
    pub adapt: AdaptConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            report_episodes: 10,
            adapt: AdaptConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub goal: Point,
    /// Defaults to the maze's own horizon.
    pub episode_len: Option<usize>,
    /// Environment steps split evenly across skills during selection.
    pub selection_budget: usize,
    pub finetune_steps: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            goal: [-0.8, 0.8],
            episode_len: None,
            selection_budget: 10_000,
            finetune_steps: 20_000,
            eval_episodes: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub theorem1_tuples: usize,
    pub lambdas: Vec<f64>,
    pub gradient_points: usize,
    /// Skill means sit at `(±offset, 0)`.
    pub fidelity_offset: f64,
    pub fidelity_sigma: f64,
    pub fidelity: FidelityConfig,
    pub theorem2: Theorem2Options,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            theorem1_tuples: 1000,
            lambdas: vec![1.0, 1.5, 2.0, 3.0],
            gradient_points: 100,
            fidelity_offset: 0.2,
            fidelity_sigma: 0.1,
            fidelity: FidelityConfig::default(),
            theorem2: Theorem2Options::default(),
            seed: 0,
        }
    }
}

/// Recursive object merge; a tagged enum (an object with a `kind` key) is
/// replaced as a whole when the patch names a different variant.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            if p.get("kind").is_some_and(|k| b.get("kind") != Some(k)) {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a possibly partial document; every key it sets overrides the
    /// corresponding default, however deeply nested.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        if !patch.is_object() {
            bail!("the configuration must be a JSON object");
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, patch);
        Ok(serde_json::from_value(base)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.report_episodes == 0 {
            bail!("report_episodes must be positive");
        }
        if self.verify.lambdas.iter().any(|l| !(*l >= 1.0)) {
            bail!("verify.lambdas must all be at least 1");
        }
        if !(self.verify.fidelity_sigma > 0.0) {
            bail!("verify.fidelity_sigma must be positive");
        }
        if self.adapt.eval_episodes == 0 || self.adapt.batch_size == 0 {
            bail!("adapt.eval_episodes and adapt.batch_size must be positive");
        }
        self.pretrain.resolved()?;
        Ok(())
    }

    /// Applies the command-line overrides.
    pub fn with_overrides(mut self, out: Option<&Path>, seed: Option<u64>) -> Self {
        if let Some(o) = out {
            self.output_dir = o.to_path_buf();
        }
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seedz": [1]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"n_skill": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"cvae": {"widht": 3}}}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
        let partial = RunConfig::from_json(r#"{"seeds": [7]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
    }

    #[test]
    fn partial_nested_objects_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"pretrain": {"cvae": {"sigma_dec": 0.1}}}"#).unwrap();
        let base = RunConfig::default();
        assert_eq!(cfg.pretrain.cvae.sigma_dec, 0.1);
        assert_eq!(cfg.pretrain.cvae.width, base.pretrain.cvae.width);
        assert_eq!(cfg.pretrain.update_every, base.pretrain.update_every);
    }

    #[test]
    fn environment_names_parse() {
        for (text, name) in [
            (r#"{"kind": "gridworld", "side": 5}"#, "gridworld"),
            (r#"{"kind": "u_maze"}"#, "u_maze"),
            (r#"{"kind": "tree_maze"}"#, "tree_maze"),
        ] {
            let cfg = RunConfig::from_json(&format!(r#"{{"pretrain": {{"env": {text}}}}}"#)).unwrap();
            assert_eq!(cfg.pretrain.env.name(), name);
        }
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["u_maze_desk.json", "tree_maze.json", "gridworld.json"] {
            RunConfig::load(&dir.join(name)).unwrap();
        }
        let desk = RunConfig::load(&dir.join("u_maze_desk.json")).unwrap();
        assert_eq!(desk.pretrain, PretrainConfig::u_maze_desk());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::default().with_overrides(Some(Path::new("x")), Some(9));
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }
}
