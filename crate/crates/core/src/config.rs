//! Run configuration: defaults, a TOML file, `FLOWPREF_SEED`, then `--set`
//! overrides, in increasing precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageMode;
use crate::analysis::{DagcBasis, SweepConfig, DEFAULT_LEVEL_EPS};
use crate::consistency::{ConsistencyTrainConfig, DEFAULT_FEATURIZER_SEED};
use crate::error::{Error, Result};
use crate::flowcore::{FlowTrainConfig, DEFAULT_HIDDEN, DEFAULT_SAMPLE_STEPS};
use crate::nft::{FinetuneConfig, FinetuneMode, NftParams, PositiveWeight};
use crate::rewards::RewardRegistry;
use crate::toyworld::Profile;

pub const SEED_ENV: &str = "FLOWPREF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub size: usize,
    pub profile: Profile,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            size: 32,
            profile: Profile::Easy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub cosine_decay: bool,
    pub sample_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let t = FlowTrainConfig::default();
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            cosine_decay: t.cosine_decay,
            sample_steps: DEFAULT_SAMPLE_STEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub featurizer_seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        let t = ConsistencyTrainConfig::default();
        Self {
            steps: t.steps,
            lr: t.lr,
            tau: t.tau,
            batch_size: t.batch_size,
            featurizer_seed: DEFAULT_FEATURIZER_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub mode: FinetuneMode,
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub groups: usize,
    pub rollouts: usize,
    pub steps: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub beta: f64,
    pub kl_weight: f64,
    pub ema_decay: f64,
    pub z_c: f64,
    pub epsilon: f64,
    pub positive: PositiveWeight,
}

impl Default for RlConfig {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        let p = NftParams::default();
        Self {
            mode: f.mode,
            outer_iters: f.outer_iters,
            inner_steps: f.inner_steps,
            groups: f.groups,
            rollouts: f.rollouts,
            steps: f.sample_steps,
            minibatch: f.minibatch,
            lr: f.lr,
            beta: p.beta,
            kl_weight: p.kl_weight,
            ema_decay: crate::nft::DEFAULT_EMA_DECAY,
            z_c: f.z_c,
            epsilon: f.epsilon,
            positive: p.positive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardsConfig {
    /// `id[:weight[:scale]]` entries.
    pub objectives: Vec<String>,
}

impl Default for RewardsConfig {
    fn default() -> Self {
        Self {
            objectives: vec!["quality:1".into(), "consistency:1".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub groups: usize,
    pub m: Vec<usize>,
    pub modes: Vec<AdvantageMode>,
    pub level_eps: f64,
    pub basis: DagcBasis,
    /// Registry used by the sweep; the heterogeneous-scale set by default.
    pub objectives: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            groups: 100,
            m: vec![2, 4, 8, 12, 16],
            modes: vec![AdvantageMode::ScalarFirst, AdvantageMode::Decoupled],
            level_eps: DEFAULT_LEVEL_EPS,
            basis: DagcBasis::RewardWeight,
            objectives: HETEROGENEOUS_OBJECTIVES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Quality, consistency and a mean-intensity term whose spread across
/// inputs is two orders of magnitude larger than within a rollout group.
pub const HETEROGENEOUS_OBJECTIVES: [&str; 3] = ["quality:1", "consistency:1", "mean_intensity:1:10"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub consistency: ConsistencyConfig,
    pub rl: RlConfig,
    pub rewards: RewardsConfig,
    pub analysis: AnalysisConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words that are not valid TOML (e.g. `decoupled`) are strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_table() {
                return Err(Error::Config(format!("`{key}` is a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config("empty key".into()))
}

fn merge(base: &mut toml::Value, over: toml::Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Resolves the layered configuration. `env_seed` is the raw value of
    /// `FLOWPREF_SEED`, if set.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, sets: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = file {
            let over: toml::Value = toml::from_str::<toml::Table>(text)
                .map(toml::Value::Table)
                .map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge(&mut tree, over, "")?;
        }
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
            set_path(&mut tree, "seed", toml::Value::Integer(seed as i64))?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {s}`: expected key=value")))?;
            set_path(&mut tree, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), env.as_deref(), sets)
    }

    pub fn validate(&self) -> Result<()> {
        self.registry()?;
        self.analysis_registry()?;
        if !(self.rl.beta > 0.0 && self.rl.beta <= 1.0) {
            return Err(Error::validation("rl.beta", format!("{} not in (0, 1]", self.rl.beta)));
        }
        if self.rl.rollouts < 2 {
            return Err(Error::validation("rl.rollouts", "need at least 2"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn registry(&self) -> Result<RewardRegistry> {
        RewardRegistry::parse(&self.rewards.objectives.join(","))
    }

    pub fn analysis_registry(&self) -> Result<RewardRegistry> {
        RewardRegistry::parse(&self.analysis.objectives.join(","))
    }

    pub fn flow_train(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            steps: self.flow.steps,
            lr: self.flow.lr,
            batch_size: self.flow.batch_size,
            weight_decay: self.flow.weight_decay,
            cosine_decay: self.flow.cosine_decay,
            seed: self.seed,
        }
    }

    pub fn consistency_train(&self) -> ConsistencyTrainConfig {
        ConsistencyTrainConfig {
            steps: self.consistency.steps,
            lr: self.consistency.lr,
            tau: self.consistency.tau,
            batch_size: self.consistency.batch_size,
            seed: self.seed,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            mode: self.rl.mode,
            outer_iters: self.rl.outer_iters,
            inner_steps: self.rl.inner_steps,
            groups: self.rl.groups,
            rollouts: self.rl.rollouts,
            sample_steps: self.rl.steps,
            minibatch: self.rl.minibatch,
            lr: self.rl.lr,
            z_c: self.rl.z_c,
            epsilon: self.rl.epsilon,
            seed: self.seed,
        }
    }

    pub fn nft_params(&self) -> NftParams {
        NftParams {
            beta: self.rl.beta,
            kl_weight: self.rl.kl_weight,
            positive: self.rl.positive,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            modes: self.analysis.modes.clone(),
            rollout_counts: self.analysis.m.clone(),
            level_eps: self.analysis.level_eps,
            basis: self.analysis.basis,
            sample_steps: self.rl.steps,
            z_c: self.rl.z_c,
            epsilon: self.rl.epsilon,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.consistency.tau, 0.7);
        assert_eq!((c.rl.rollouts, c.rl.steps), (12, 6));
        assert_eq!((c.rl.ema_decay, c.rl.kl_weight, c.rl.beta, c.rl.z_c), (0.9, 1e-4, 0.1, 1.0));
        assert_eq!(c.registry().unwrap().k(), 2);
    }

    #[test]
    fn precedence_is_file_then_env_then_set() {
        let file = "seed = 5\n[flow]\nsteps = 10\nlr = 0.5\n";
        let c = RunConfig::resolve(Some(file), None, &[]).unwrap();
        assert_eq!((c.seed, c.flow.steps, c.flow.lr), (5, 10, 0.5));
        let c = RunConfig::resolve(Some(file), Some("9"), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = RunConfig::resolve(Some(file), Some("9"), &["seed=11".into(), "flow.steps=3".into()]).unwrap();
        assert_eq!((c.seed, c.flow.steps, c.flow.lr), (11, 3, 0.5));
    }

    #[test]
    fn set_parses_typed_values() {
        let sets = [
            "rl.mode=iqa-only".to_string(),
            "analysis.m=[2, 4]".into(),
            "rewards.objectives=[\"quality\"]".into(),
            "flow.cosine_decay=false".into(),
        ];
        let c = RunConfig::resolve(None, None, &sets).unwrap();
        assert_eq!(c.rl.mode, FinetuneMode::IqaOnly);
        assert_eq!(c.analysis.m, [2, 4]);
        assert_eq!(c.registry().unwrap().k(), 1);
        assert!(!c.flow.cosine_decay);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["flow.stepz=3", "nope=1", "flow=3", "seed"] {
            assert!(matches!(RunConfig::resolve(None, None, &[bad.into()]), Err(Error::Config(_))), "{bad}");
        }
        assert!(matches!(RunConfig::resolve(Some("[flow]\nbogus = 1\n"), None, &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, Some("x"), &[]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::resolve(None, None, &["rewards.objectives=[\"sharpness\"]".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::resolve(None, None, &["seed=3".into(), "rl.lr=2.5e-5".into()]).unwrap();
        let back = RunConfig::resolve(Some(&c.to_toml()), None, &[]).unwrap();
        assert_eq!(back, c);
    }
}
