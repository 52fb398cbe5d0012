//! Experiment configuration: a flat file of dotted `key = value` lines.
//!
//! ```text
//! sampler.steps = 8
//! train.algorithm = "vipo"
//! psm.sigma = "off"
//! experiment.seeds = [0, 1, 2, 3, 4]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow_model::{Architecture, DatasetConfig, PretrainConfig};
use crate::psm::PsmConfig;
use crate::rewards::{RewardKind, RewardSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub milestones: Vec<usize>,
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Matched-reward threshold above the pretrained evaluation redness.
    pub crossing_delta: f64,
    /// Trailing window for the smoothed rollout reward.
    pub smoothing_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            milestones: vec![0, 25, 50, 100, 200],
            eval_samples: 24,
            eval_seed: 1000,
            crossing_delta: 0.1,
            smoothing_window: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub updates: usize,
    pub seed: u64,
    pub k_values: Vec<usize>,
    /// `None` disables smoothing.
    pub sigmas: Vec<Option<f64>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            updates: 50,
            seed: 0,
            k_values: vec![1, 2, 3, 4, 5],
            sigmas: vec![None, Some(0.5), Some(1.0), Some(1.5), Some(2.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub data_seed: u64,
    pub arch: Architecture,
    pub model_seed: u64,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        Self {
            arch: Architecture {
                side: data.side,
                num_classes: data.num_classes(),
                ..Default::default()
            },
            data,
            data_seed: 0,
            model_seed: 1,
            pretrain: PretrainConfig::default(),
            pretrain_seed: 2,
            train: TrainConfig {
                lr: 3e-5,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            checkpoint: PathBuf::from("runs/pretrained.vipc"),
            output: PathBuf::from("runs"),
        }
    }
}

/// Flattened `dotted.key → value` view that tracks which keys were read.
struct Flat {
    values: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn type_err(key: &str, want: &str, got: &toml::Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {got}"))
}

impl Flat {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.values.remove(key)
    }

    fn float(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = match v {
                toml::Value::Float(f) => f,
                toml::Value::Integer(i) => i as f64,
                other => return Err(type_err(key, "a number", &other)),
            };
        }
        Ok(())
    }

    fn count(&mut self, key: &str, slot: &mut usize) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = as_count(key, &v)?;
        }
        Ok(())
    }

    fn seed(&mut self, key: &str, slot: &mut u64) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = as_count(key, &v)? as u64;
        }
        Ok(())
    }

    fn flag(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = v.as_bool().ok_or_else(|| type_err(key, "true or false", &v))?;
        }
        Ok(())
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(type_err(key, "a string", &other)),
        }
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(s) = self.string(key)? {
            *slot = s.parse()?;
        }
        Ok(())
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<toml::Value>>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => Ok(Some(a)),
            Some(other) => Err(type_err(key, "a list", &other)),
        }
    }

    fn counts(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        self.list(key)?
            .map(|vs| vs.iter().map(|v| as_count(key, v)).collect())
            .transpose()
    }
}

fn as_count(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(type_err(key, "a non-negative integer", other)),
    }
}

/// `"off"` or a non-negative number.
fn as_sigma(key: &str, v: &toml::Value) -> Result<Option<f64>> {
    match v {
        toml::Value::String(s) if s == "off" => Ok(None),
        toml::Value::Float(f) if *f >= 0.0 => Ok(Some(*f)),
        toml::Value::Integer(i) if *i >= 0 => Ok(Some(*i as f64)),
        other => Err(type_err(key, "\"off\" or a number ≥ 0", other)),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        let mut f = Flat { values };
        let mut c = ExperimentConfig::default();

        f.count("data.side", &mut c.data.side)?;
        f.count("data.per_class", &mut c.data.per_class)?;
        f.flag("data.jitter", &mut c.data.jitter)?;
        f.seed("data.seed", &mut c.data_seed)?;

        f.count("model.hidden", &mut c.arch.hidden)?;
        f.count("model.layers", &mut c.arch.layers)?;
        f.count("model.kernel", &mut c.arch.kernel)?;
        f.seed("model.seed", &mut c.model_seed)?;

        f.count("pretrain.steps", &mut c.pretrain.steps)?;
        f.count("pretrain.batch", &mut c.pretrain.batch)?;
        f.float("pretrain.lr", &mut c.pretrain.lr)?;
        f.seed("pretrain.seed", &mut c.pretrain_seed)?;

        let t = &mut c.train;
        f.count("sampler.steps", &mut t.sampler.num_steps)?;
        f.float("sampler.eta", &mut t.sampler.eta)?;
        f.float("sampler.t_floor", &mut t.sampler.t_floor)?;
        f.flag("sampler.shared_init", &mut t.sampler.shared_init)?;

        f.parsed("train.algorithm", &mut t.algorithm)?;
        f.float("train.clip_eps", &mut t.clip_eps)?;
        f.float("train.timestep_fraction", &mut t.timestep_fraction)?;
        f.float("train.lr", &mut t.lr)?;
        f.count("train.group_size", &mut t.group_size)?;
        f.count("train.groups_per_update", &mut t.groups_per_update)?;
        f.count("train.updates", &mut t.total_updates)?;
        f.parsed("train.map_target", &mut t.map_target)?;
        f.count("train.checkpoint_every", &mut t.checkpoint_every)?;

        let mut reward_kind = t.reward.kind;
        f.parsed::<RewardKind>("reward.kind", &mut reward_kind)?;
        let reward_target = f.string("reward.target")?;

        let p = &mut t.psm;
        f.count("psm.k", &mut p.k)?;
        if let Some(v) = f.take("psm.sigma") {
            match as_sigma("psm.sigma", &v)? {
                Some(s) => {
                    p.sigma = s;
                    p.smoothing_enabled = true;
                }
                None => p.smoothing_enabled = false,
            }
        }
        f.parsed("psm.aggregation", &mut p.aggregation)?;
        f.parsed("psm.path", &mut p.path)?;
        f.count("psm.patch", &mut p.patch)?;
        f.flag("psm.invert", &mut p.invert)?;

        let e = &mut c.eval;
        if let Some(seeds) = f.counts("experiment.seeds")? {
            e.seeds = seeds.into_iter().map(|s| s as u64).collect();
        }
        if let Some(m) = f.counts("experiment.milestones")? {
            e.milestones = m;
        }
        f.count("experiment.eval_samples", &mut e.eval_samples)?;
        f.seed("experiment.eval_seed", &mut e.eval_seed)?;
        f.float("experiment.crossing_delta", &mut e.crossing_delta)?;
        f.count("experiment.smoothing_window", &mut e.smoothing_window)?;

        let a = &mut c.ablation;
        f.count("ablation.updates", &mut a.updates)?;
        f.seed("ablation.seed", &mut a.seed)?;
        if let Some(ks) = f.counts("ablation.k_values")? {
            a.k_values = ks;
        }
        if let Some(vs) = f.list("ablation.sigmas")? {
            a.sigmas = vs
                .iter()
                .map(|v| as_sigma("ablation.sigmas", v))
                .collect::<Result<_>>()?;
        }

        if let Some(s) = f.string("checkpoint")? {
            c.checkpoint = PathBuf::from(s);
        }
        if let Some(s) = f.string("output")? {
            c.output = PathBuf::from(s);
        }

        if let Some(key) = f.values.keys().next() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }

        c.arch.side = c.data.side;
        c.arch.num_classes = c.data.num_classes();
        c.train.reward = RewardSpec {
            kind: reward_kind,
            target: reward_target
                .map(|name| c.data.class_index(&name.parse()?))
                .transpose()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.eval.seeds.is_empty() || self.eval.milestones.is_empty() || self.eval.eval_samples == 0 {
            return Err(Error::Config(
                "experiment needs seeds, milestones and eval samples".into(),
            ));
        }
        if self.eval.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must strictly increase".into()));
        }
        if !self.data.side.is_multiple_of(self.train.psm.patch) {
            return Err(Error::Config(format!(
                "psm.patch {} does not divide the image side {}",
                self.train.psm.patch, self.data.side
            )));
        }
        Ok(())
    }

    /// Restrict the run to one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.eval.seeds = vec![seed];
        self.ablation.seed = seed;
        self
    }

    /// PSM settings of the ablation cell with `k` components and smoothing `sigma`.
    pub fn psm_variant(&self, k: usize, sigma: Option<f64>) -> PsmConfig {
        PsmConfig {
            k,
            sigma: sigma.unwrap_or(self.train.psm.sigma),
            smoothing_enabled: sigma.is_some(),
            ..self.train.psm.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psm::Aggregation;
    use crate::trainer::{Algorithm, MapTarget};

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn keys_are_applied() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            # comment
            sampler.steps = 4
            sampler.eta = 0.5
            train.algorithm = "grpo"
            train.map_target = "reward"
            train.lr = 1e-4
            psm.sigma = "off"
            psm.aggregation = "average"
            reward.kind = "class_template"
            reward.target = "red_circle_on_black"
            experiment.seeds = [7]
            ablation.sigmas = ["off", 2]
            checkpoint = "x/model.vipc"
            "#,
        )
        .unwrap();
        assert_eq!(c.train.sampler.num_steps, 4);
        assert_eq!(c.train.sampler.eta, 0.5);
        assert_eq!(c.train.algorithm, Algorithm::Grpo);
        assert_eq!(c.train.map_target, MapTarget::Reward);
        assert!(!c.train.psm.smoothing_enabled);
        assert_eq!(c.train.psm.aggregation, Aggregation::Average);
        assert_eq!(c.train.reward.kind, RewardKind::ClassTemplate);
        assert_eq!(c.train.reward.target, Some(7));
        assert_eq!(c.eval.seeds, vec![7]);
        assert_eq!(c.ablation.sigmas, vec![None, Some(2.0)]);
        assert_eq!(c.checkpoint, PathBuf::from("x/model.vipc"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "nonsense.key = 1",
            "train.algorithm = \"ppo\"",
            "train.clip_eps = 2.0",
            "sampler.steps = -1",
            "psm.sigma = \"maybe\"",
            "experiment.milestones = [5, 1]",
            "psm.patch = 3",
            "data.side = 20",
            "train.lr = ",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
