//! Run configuration: a flat, typed key-value document.
//!
//! Keys are dotted paths such as `train.epochs`. A config file may spell
//! them as dotted keys or as TOML tables; both flatten to the same keys.
//! Values from the file override the defaults, and `--set` overrides win
//! over the file. Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::advtrain::{AttackConfig, Objective, TrainConfig};
use crate::data::{self, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::fpcm::{AlphaSpec, BetaMode};
use crate::model::{FpcmConfig, ModelConfig, Placement, StageConfig};
use crate::spectral::FilterKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic` or `cifar10`.
    pub source: String,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: String,
    /// Balanced subset sizes; 0 keeps the whole split.
    pub train_limit: usize,
    pub test_limit: usize,
    pub synth_classes: usize,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_side: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    /// `none`, `per_stage_end`, `after_stage_end` or `custom`.
    pub placement: String,
    /// Slots for the `custom` placement.
    pub slots: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpcmSection {
    /// `conv`, `mlp` or `fixed`.
    pub alpha: String,
    pub alpha_value: f64,
    pub kernel: usize,
    pub hidden: usize,
    /// `scheduled` or `fixed`.
    pub beta_mode: String,
    pub beta: f64,
    /// `gaussian` or `allpass`.
    pub filter: String,
    pub detached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// `pgd_at`, `trades` or `natural`.
    pub objective: String,
    pub beta_trades: f64,
    pub eval_each_epoch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub step_size: f64,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub random_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
    pub pi_nat: f64,
    pub pi_adv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Cutoff factor of the profile's high band.
    pub beta: f64,
    /// Test samples used by profile, sweep and alpha statistics; 0 = all.
    pub samples: usize,
    pub sweep_betas: Vec<f64>,
    pub sweep_epsilon: f64,
    pub sweep_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub fpcm: FpcmSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection {
                source: "synthetic".into(),
                dir: "data/cifar-10-batches-bin".into(),
                train_limit: 5000,
                test_limit: 1000,
                synth_classes: 10,
                synth_train_per_class: 50,
                synth_test_per_class: 20,
                synth_side: 16,
                synth_noise: 0.1,
                synth_seed: 0,
                augment: false,
            },
            model: ModelSection {
                channels: vec![16, 32, 64],
                blocks: vec![2, 2, 2],
                placement: "per_stage_end".into(),
                slots: Vec::new(),
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            },
            fpcm: FpcmSection {
                alpha: "conv".into(),
                alpha_value: 1.0,
                kernel: 3,
                hidden: 16,
                beta_mode: "scheduled".into(),
                beta: 0.125,
                filter: "gaussian".into(),
                detached: false,
            },
            train: TrainSection {
                epochs: 20,
                batch_size: 64,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                milestones: vec![0.7, 0.9],
                lr_decay: 0.1,
                objective: "pgd_at".into(),
                beta_trades: 6.0,
                eval_each_epoch: false,
            },
            attack: AttackSection {
                epsilon: 8.0 / 255.0,
                step_size: 2.0 / 255.0,
                train_steps: 10,
                eval_steps: 20,
                random_start: true,
            },
            eval: EvalSection {
                batch_size: 100,
                pi_nat: 0.5,
                pi_adv: 0.5,
            },
            analysis: AnalysisSection {
                beta: 0.125,
                samples: 200,
                sweep_betas: vec![0.0625, 0.125, 0.25, 0.5, 1.0],
                sweep_epsilon: 16.0 / 255.0,
                sweep_draws: 3,
            },
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        t.insert(last.to_string(), v.clone());
    }
    root
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Parses the right-hand side of a `--set key=value` override. Anything
/// that is not a TOML value is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Builds a resolved config from defaults, an optional file and overrides.
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    values: BTreeMap<String, Value>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        let table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        Self { values }
    }
}

impl ConfigBuilder {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Sets one key, checking that it exists and that the value has the
    /// default's type. Integers are accepted where floats are expected.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let current = self
            .values
            .get(key)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        let value = match (current, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::Array(_), Value::Array(items)) => Value::Array(items),
            (c, v) if std::mem::discriminant(c) == std::mem::discriminant(&v) => v,
            (c, v) => {
                return Err(Error::config(format!(
                    "key `{key}` expects {}, got {}",
                    type_name(c),
                    type_name(&v)
                )))
            }
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), parse_value(v.trim()))
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: Table = toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
        self.merge_toml(&text)
    }

    pub fn build(&self) -> Result<RunConfig> {
        let cfg: RunConfig = unflatten(&self.values)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// The resolved configuration as a TOML document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut b = ConfigBuilder::default();
        b.merge_toml(text)?;
        b.build()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train_config()?.validate()?;
        self.attack_config(self.attack.train_steps).validate()?;
        self.attack_config(self.attack.eval_steps).validate()?;
        if !matches!(self.data.source.as_str(), "synthetic" | "cifar10") {
            return Err(Error::config(format!(
                "key `data.source`: expected synthetic or cifar10, got `{}`",
                self.data.source
            )));
        }
        if self.data.source == "synthetic" {
            self.synth_spec(Split::Train).validate()?;
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("key `eval.batch_size` must be at least 1"));
        }
        if !(self.eval.pi_nat >= 0.0 && self.eval.pi_adv >= 0.0) {
            return Err(Error::config("keys `eval.pi_nat` and `eval.pi_adv` must be non-negative"));
        }
        if !(self.analysis.beta > 0.0 && self.analysis.beta <= 1.0) {
            return Err(Error::config("key `analysis.beta` must lie in (0, 1]"));
        }
        if self.analysis.sweep_betas.is_empty() || self.analysis.sweep_betas.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::config("key `analysis.sweep_betas` needs positive values"));
        }
        if self.analysis.sweep_draws == 0 || !(0.0..=1.0).contains(&self.analysis.sweep_epsilon) {
            return Err(Error::config("keys `analysis.sweep_draws` >= 1 and `analysis.sweep_epsilon` in [0, 1]"));
        }
        Ok(())
    }

    /// Image shape and class count of the configured data source.
    pub fn data_geometry(&self) -> ([usize; 3], usize) {
        match self.data.source.as_str() {
            "cifar10" => ([3, data::CIFAR_SIDE, data::CIFAR_SIDE], data::CIFAR_CLASSES),
            _ => ([3, self.data.synth_side, self.data.synth_side], self.data.synth_classes),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        if m.channels.len() != m.blocks.len() {
            return Err(Error::config("keys `model.channels` and `model.blocks` need equal lengths"));
        }
        let placement = match m.placement.as_str() {
            "none" => Placement::None,
            "per_stage_end" => Placement::PerStageEnd,
            "after_stage_end" => Placement::AfterStageEnd,
            "custom" => Placement::Custom(m.slots.clone()),
            other => return Err(Error::config(format!("key `model.placement`: unknown value `{other}`"))),
        };
        let f = &self.fpcm;
        let alpha = match f.alpha.as_str() {
            "conv" => AlphaSpec::Conv { kernel: f.kernel },
            "mlp" => AlphaSpec::Mlp { hidden: f.hidden },
            "fixed" => AlphaSpec::Fixed { alpha: f.alpha_value },
            other => return Err(Error::config(format!("key `fpcm.alpha`: unknown value `{other}`"))),
        };
        let beta = match f.beta_mode.as_str() {
            "scheduled" => BetaMode::Scheduled,
            "fixed" => BetaMode::Fixed(f.beta),
            other => return Err(Error::config(format!("key `fpcm.beta_mode`: unknown value `{other}`"))),
        };
        let filter = match f.filter.as_str() {
            "gaussian" => FilterKind::Gaussian,
            "allpass" => FilterKind::AllPass,
            other => return Err(Error::config(format!("key `fpcm.filter`: unknown value `{other}`"))),
        };
        let (input, classes) = self.data_geometry();
        Ok(ModelConfig {
            input,
            classes,
            stages: m
                .channels
                .iter()
                .zip(&m.blocks)
                .map(|(&channels, &blocks)| StageConfig { channels, blocks })
                .collect(),
            placement,
            fpcm: FpcmConfig {
                alpha,
                beta,
                filter,
                detached: f.detached,
            },
            bn_eps: m.bn_eps,
            bn_momentum: m.bn_momentum,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let objective = match t.objective.as_str() {
            "pgd_at" => Objective::PgdAt,
            "trades" => Objective::Trades {
                beta_trades: t.beta_trades,
            },
            "natural" => Objective::Natural,
            other => return Err(Error::config(format!("key `train.objective`: unknown value `{other}`"))),
        };
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            milestones: t.milestones.clone(),
            lr_decay: t.lr_decay,
            objective,
            augment: self.data.augment,
            seed: self.seed,
        })
    }

    pub fn attack_config(&self, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            step_size: self.attack.step_size,
            steps,
            random_start: self.attack.random_start,
        }
    }

    pub fn synth_spec(&self, split: Split) -> SynthSpec {
        let d = &self.data;
        let per_class = match split {
            Split::Train => d.synth_train_per_class,
            Split::Test => d.synth_test_per_class,
        };
        SynthSpec::new(d.synth_classes, per_class, d.synth_side, d.synth_noise, d.synth_seed)
    }

    /// Loads the configured split.
    pub fn load_data(&self, split: Split) -> Result<Dataset> {
        match self.data.source.as_str() {
            "cifar10" => {
                let limit = match split {
                    Split::Train => self.data.train_limit,
                    Split::Test => self.data.test_limit,
                };
                data::load_cifar10(&PathBuf::from(&self.data.dir), split, (limit > 0).then_some(limit))
            }
            _ => data::synth_dataset(&self.synth_spec(split), split),
        }
    }
}
