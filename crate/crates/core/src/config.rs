//! Run configuration: TOML file over a named preset, then `SEEA_*`
//! environment overrides.
//!
//! Grammar: top-level keys first, then one `[section]` table per component
//! (`env`, `policy`, `search`, `optim`, `mgrm`, `rm_train`). An optional
//! top-level `preset = "default" | "fast" | "paper-scale"` picks the base
//! that the file's keys are layered over. Unknown keys are rejected.
//!
//! Overrides: `SEEA_<KEY>` sets a top-level key, `SEEA_<SECTION>_<KEY>` a
//! section key (names are matched case-insensitively). Values are parsed
//! as TOML literals, falling back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mcts::SearchConfig;
use crate::mgrm::MgrmConfig;
use crate::optim::{OptimConfig, OptimizerKind};
use crate::policy::PolicyConfig;

pub const SECTIONS: [&str; 6] = ["env", "policy", "search", "optim", "mgrm", "rm_train"];
pub const ENV_PREFIX: &str = "SEEA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    GroundTruth,
    FrozenMgrm,
    SupervisedMgrm,
    SelfSupervisedMgrm,
}

impl RewardMode {
    pub const ALL: [RewardMode; 4] =
        [Self::GroundTruth, Self::FrozenMgrm, Self::SupervisedMgrm, Self::SelfSupervisedMgrm];

    pub fn name(self) -> &'static str {
        match self {
            Self::GroundTruth => "ground-truth",
            Self::FrozenMgrm => "frozen-mgrm",
            Self::SupervisedMgrm => "supervised-mgrm",
            Self::SelfSupervisedMgrm => "self-supervised-mgrm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward mode `{s}`")))
    }

    pub fn uses_reward_model(self) -> bool {
        self != Self::GroundTruth
    }
}

/// Reward-model training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    /// Episodes of simulator-labeled data per calibration round.
    pub calibration_interval: usize,
    /// Full-batch cross-entropy steps per calibration round.
    pub calibration_steps: usize,
    pub supervised_lr: f64,
    /// Initial states voted on per iteration in self-supervised mode.
    pub ttrl_states: usize,
    pub ttrl_steps: usize,
    pub ttrl_lr: f64,
    /// Two-object episodes used to pretrain the self-supervised base model.
    pub pretrain_episodes: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Searched episodes behind the held-out accuracy set.
    pub heldout_episodes: usize,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            calibration_interval: 500,
            calibration_steps: 20,
            supervised_lr: 0.5,
            ttrl_states: 8,
            ttrl_steps: 1,
            ttrl_lr: 0.05,
            pretrain_episodes: 64,
            pretrain_steps: 400,
            pretrain_lr: 0.5,
            heldout_episodes: 10,
        }
    }
}

impl RmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rm_train.{m}")));
        if self.calibration_interval < 1 {
            return bad("calibration_interval must be >= 1");
        }
        for (name, lr) in [
            ("supervised_lr", self.supervised_lr),
            ("ttrl_lr", self.ttrl_lr),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if self.heldout_episodes < 1 {
            return bad("heldout_episodes must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base the file was layered over; informational once resolved.
    pub preset: String,
    pub reward_mode: RewardMode,
    pub iterations: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub min_group_size: usize,
    /// Episodes searched per iteration at most, as a multiple of
    /// `valid_samples_per_iteration`.
    pub episode_cap_factor: usize,
    /// Episodes searched concurrently between buffer checks. Fixed so that
    /// results do not depend on the worker count.
    pub collect_batch: usize,
    pub out_dir: PathBuf,
    pub dump_experience: bool,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub search: SearchConfig,
    pub optim: OptimConfig,
    pub mgrm: MgrmConfig,
    pub rm_train: RmTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            reward_mode: RewardMode::GroundTruth,
            iterations: 20,
            eval_episodes: 100,
            seed: 0,
            min_group_size: 2,
            episode_cap_factor: 10,
            collect_batch: 16,
            out_dir: PathBuf::from("runs/default"),
            dump_experience: false,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            search: SearchConfig::default(),
            optim: OptimConfig::default(),
            mgrm: MgrmConfig::default(),
            rm_train: RmTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "fast" => Ok(Self::fast()),
            "paper-scale" => Ok(Self {
                preset: name.into(),
                optim: OptimConfig::paper_scale(),
                ..Self::default()
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected default, fast or paper-scale)"
            ))),
        }
    }

    /// Small budgets for tests and quick experiments.
    pub fn fast() -> Self {
        let mut c = Self { preset: "fast".into(), ..Self::default() };
        c.optim.valid_samples_per_iteration = 64;
        c.optim.batch_size = 16;
        c.optim.optimizer = OptimizerKind::Adam;
        c.optim.lr0 = 1e-2;
        c.rm_train.calibration_interval = 50;
        c.rm_train.calibration_steps = 100;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.search.validate()?;
        self.optim.validate()?;
        self.mgrm.validate()?;
        self.rm_train.validate()?;
        if self.eval_episodes < 1 {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        if self.min_group_size < 2 {
            return Err(Error::Config("min_group_size must be >= 2".into()));
        }
        if self.episode_cap_factor < 1 || self.collect_batch < 1 {
            return Err(Error::Config("episode_cap_factor and collect_batch must be >= 1".into()));
        }
        if self.search.max_depth > self.env.max_episode_steps as usize {
            return Err(Error::Config(format!(
                "search.max_depth ({}) exceeds env.max_episode_steps ({})",
                self.search.max_depth, self.env.max_episode_steps
            )));
        }
        if self.reward_mode == RewardMode::SelfSupervisedMgrm && self.mgrm.votes < 3 {
            return Err(Error::Config("self-supervised-mgrm needs mgrm.votes >= 3".into()));
        }
        Ok(())
    }

    /// Optimizer steps per iteration for the schedule.
    pub fn steps_per_iteration(&self) -> usize {
        if self.optim.steps_per_iter > 0 {
            self.optim.steps_per_iter
        } else {
            self.optim.valid_samples_per_iteration.div_ceil(self.optim.batch_size)
        }
    }

    pub fn schedule_steps(&self) -> usize {
        if self.optim.total_steps > 0 {
            self.optim.total_steps
        } else {
            self.iterations * self.steps_per_iteration()
        }
    }

    /// SHA-256 over the canonical JSON of every field that influences
    /// results. The output directory and preset label are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("preset");
            obj.remove("dump_experience");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parse TOML text over its preset, without environment overrides.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve(text, std::iter::empty())
    }

    /// Layer `text` over its preset, then apply `SEEA_*` overrides from
    /// `vars`.
    pub fn resolve(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut overrides = Vec::new();
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                overrides.push((key.to_ascii_lowercase(), v));
            }
        }
        let preset = overrides
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("preset").and_then(|p| p.as_str()).map(str::to_string))
            .unwrap_or_else(|| "default".into());
        let base = Self::preset(&preset)?;
        let mut table: toml::Table = toml::Table::try_from(&base)
            .map_err(|e| Error::Config(format!("preset `{preset}`: {e}")))?;
        merge(&mut table, file);
        for (key, raw) in overrides {
            apply_override(&mut table, &key, &raw)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::resolve(&text, vars).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_literal(raw);
    for section in SECTIONS {
        if let Some(field) = key.strip_prefix(section).and_then(|r| r.strip_prefix('_')) {
            let sub = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = sub {
                t.insert(field.to_string(), value);
                return Ok(());
            }
        }
    }
    if key.is_empty() {
        return Err(Error::Config(format!("empty override name `{ENV_PREFIX}`")));
    }
    table.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for name in ["default", "fast", "paper-scale"] {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn file_layers_over_preset() {
        let c = RunConfig::from_toml_str("preset = \"fast\"\niterations = 3\n[optim]\nbeta = 0.1\n").unwrap();
        assert_eq!(c.iterations, 3);
        assert_eq!(c.optim.beta, 0.1);
        assert_eq!(c.optim.valid_samples_per_iteration, 64);
    }

    #[test]
    fn env_overrides() {
        let vars = vec![
            ("SEEA_OPTIM_LR0".to_string(), "0.25".to_string()),
            ("SEEA_REWARD_MODE".to_string(), "frozen-mgrm".to_string()),
            ("SEEA_SEARCH_P_EXPAND_ALL".to_string(), "1".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = RunConfig::resolve("", vars).unwrap();
        assert_eq!(c.optim.lr0, 0.25);
        assert_eq!(c.reward_mode, RewardMode::FrozenMgrm);
        assert_eq!(c.search.p_expand_all, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[optim]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml_str("iterations = \n").is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }
}
