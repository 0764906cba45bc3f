//! Scenario files and the built-in experiment presets.
//!
//! Scenarios are TOML documents; unknown keys are rejected. See
//! `scenarios/annotated.toml` at the repository root for a commented example.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{StrategyMode, StrategyPolicy, TaskSequence, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::{check_weights, LossMode};
use crate::nn::{Architecture, LayerConfig, TrainConfig};

pub const PRESETS: &[&str] = &[
    "baseline-finetune",
    "exp1-flwf1",
    "exp1-flwf2",
    "exp2-hybrid-flwf1",
    "exp2-hybrid-flwf2",
    "exp3-exemplars-flwf1",
    "exp3-exemplars-flwf2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub n_classes: usize,
    /// Number of real clients `K` the simulated clients stand for.
    pub clients_total: usize,
    /// `|D_kr|`, examples drawn per client and round.
    pub samples_per_round: usize,
    pub test_per_class: usize,
    pub train: TrainSettings,
    pub model: ModelSettings,
    pub data: DataSource,
    pub clients: Vec<ClientConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    /// Features are read as `input_channels` consecutive blocks.
    #[serde(default = "one")]
    pub input_channels: usize,
    pub layers: Vec<LayerConfig>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticData),
    Csv(CsvData),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub per_class: usize,
    pub feature_dim: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClientRole {
    /// Single-class task client whose forgetting is reported.
    Observed,
    /// Balanced all-class client standing in for `K - 1` clients.
    Generalized,
    #[default]
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarSettings {
    pub enabled: bool,
    pub per_task: usize,
}

impl Default for ExemplarSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            per_task: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub name: String,
    #[serde(default)]
    pub role: ClientRole,
    /// Aggregation weight hint: how many real clients this one models.
    pub represents: usize,
    pub algo: LossMode,
    pub strategy: StrategyPolicy,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub temperature: f64,
    #[serde(default)]
    pub exemplars: ExemplarSettings,
    pub tasks: Vec<TaskSpec>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            dropout: self.train.dropout,
            seed: self.seed,
        }
    }

    pub fn architecture(&self, feature_dim: usize) -> Result<Architecture> {
        let channels = self.model.input_channels;
        if channels == 0 || !feature_dim.is_multiple_of(channels) {
            return Err(Error::config(
                "model.input_channels",
                format!("{feature_dim} features do not split into {channels} channels"),
            ));
        }
        Architecture::new(
            channels,
            feature_dim / channels,
            self.n_classes,
            self.model.layers.clone(),
            self.train.dropout,
        )
        .map_err(|e| Error::config("model.layers", e.to_string()))
    }

    pub fn task_sequence(&self, client: usize) -> Result<TaskSequence> {
        let c = &self.clients[client];
        let total = if self.rounds == 0 {
            c.tasks.iter().map(|t| t.rounds).sum()
        } else {
            self.rounds
        };
        TaskSequence::new(c.tasks.clone(), total, self.n_classes)
            .map_err(|e| Error::config(format!("clients[{client}].tasks"), e.to_string()))
    }

    pub fn client_by_role(&self, role: ClientRole) -> Option<&ClientConfig> {
        self.clients.iter().find(|c| c.role == role)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least 2 classes"));
        }
        if self.samples_per_round == 0 {
            return Err(Error::config("samples_per_round", "must be positive"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("test_per_class", "must be positive"));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::config("train.dropout", "must lie in [0, 1)"));
        }
        if self.model.layers.is_empty() {
            return Err(Error::config("model.layers", "at least one layer is required"));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.per_class == 0 {
                    return Err(Error::config("data.synthetic.per_class", "must be positive"));
                }
                if s.feature_dim == 0 {
                    return Err(Error::config("data.synthetic.feature_dim", "must be positive"));
                }
                if !(s.separation >= 0.0 && s.separation.is_finite()) {
                    return Err(Error::config("data.synthetic.separation", "must be >= 0"));
                }
                self.architecture(s.feature_dim)?;
            }
            DataSource::Csv(c) => {
                if c.path.as_os_str().is_empty() {
                    return Err(Error::config("data.csv.path", "must not be empty"));
                }
            }
        }
        if self.clients.is_empty() {
            return Err(Error::config("clients", "at least one client is required"));
        }
        let mut represented = 0;
        for (i, c) in self.clients.iter().enumerate() {
            let field = |f: &str| format!("clients[{i}].{f}");
            if c.name.is_empty() || c.name == crate::metrics::SERVER || c.name.contains(',') {
                return Err(Error::config(
                    field("name"),
                    "must be non-empty, without commas, and not `server`",
                ));
            }
            if self.clients[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(field("name"), format!("duplicate name `{}`", c.name)));
            }
            if c.represents == 0 {
                return Err(Error::config(field("represents"), "must be positive"));
            }
            represented += c.represents;
            if !(0.0..=1.0).contains(&c.strategy.threshold) {
                return Err(Error::config(field("strategy.threshold"), "must lie in [0, 1]"));
            }
            check_weights(c.algo, c.alpha, c.beta, c.temperature).map_err(|e| {
                let which = if !(0.0..=1.0).contains(&c.alpha) {
                    "alpha"
                } else if !(c.temperature > 0.0 && c.temperature.is_finite()) {
                    "temperature"
                } else {
                    "beta"
                };
                Error::config(field(which), e.to_string())
            })?;
            if c.algo == LossMode::FineTune && c.beta.is_some() {
                return Err(Error::config(field("beta"), "only used by flwf2"));
            }
            if c.exemplars.enabled && c.exemplars.per_task == 0 {
                return Err(Error::config(field("exemplars.per_task"), "must be positive"));
            }
            self.task_sequence(i)?;
        }
        if represented != self.clients_total {
            return Err(Error::config(
                "clients_total",
                format!("clients represent {represented} clients in total, expected {}", self.clients_total),
            ));
        }
        Ok(())
    }

    /// Parses a preset name or, failing that, a path to a scenario file.
    pub fn resolve(preset_or_path: &str) -> Result<Self> {
        match preset(preset_or_path) {
            Ok(cfg) => Ok(cfg),
            Err(Error::UnknownPreset(_)) if Path::new(preset_or_path).exists() => {
                Self::load(Path::new(preset_or_path))
            }
            Err(e) => Err(e),
        }
    }
}

fn base(name: &str) -> ScenarioConfig {
    let n_classes = 6;
    ScenarioConfig {
        name: name.into(),
        seed: 1,
        rounds: 8,
        n_classes,
        clients_total: 5,
        samples_per_round: 120,
        test_per_class: 100,
        train: TrainSettings {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 10,
            dropout: 0.5,
        },
        model: ModelSettings {
            input_channels: 1,
            layers: LayerConfig::default_mlp(n_classes),
        },
        data: DataSource::Synthetic(SyntheticData {
            per_class: 1000,
            feature_dim: 16,
            separation: 2.5,
        }),
        clients: vec![
            ClientConfig {
                name: "1".into(),
                role: ClientRole::Observed,
                represents: 1,
                algo: LossMode::FineTune,
                strategy: StrategyPolicy {
                    mode: StrategyMode::FineTuneAll,
                    threshold: 0.5,
                },
                alpha: 0.001,
                beta: None,
                temperature: 2.0,
                exemplars: ExemplarSettings::default(),
                tasks: vec![
                    TaskSpec { classes: vec![1], rounds: 4 },
                    TaskSpec { classes: vec![2], rounds: 4 },
                ],
            },
            ClientConfig {
                name: "g".into(),
                role: ClientRole::Generalized,
                represents: 4,
                algo: LossMode::FineTune,
                strategy: StrategyPolicy {
                    mode: StrategyMode::FineTuneAll,
                    threshold: 0.5,
                },
                alpha: 0.001,
                beta: None,
                temperature: 2.0,
                exemplars: ExemplarSettings::default(),
                tasks: vec![TaskSpec { classes: (0..n_classes).collect(), rounds: 8 }],
            },
        ],
    }
}

/// Built-in scenarios: two clients (observed `1` learning {1} then {2}, and a
/// generalized `g` standing for four balanced clients), 8 rounds of 10 local
/// epochs on 120 examples, batch 32, lr 0.01, dropout 0.5, T = 2,
/// alpha = 0.001 and, for FLwF-2, beta = 0.7.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let mut cfg = base(name);
    let (algo, mode, exemplars) = match name {
        "baseline-finetune" => (LossMode::FineTune, StrategyMode::FineTuneAll, false),
        "exp1-flwf1" => (LossMode::Flwf1, StrategyMode::DistillAll, false),
        "exp1-flwf2" => (LossMode::Flwf2, StrategyMode::DistillAll, false),
        "exp2-hybrid-flwf1" => (LossMode::Flwf1, StrategyMode::Hybrid, false),
        "exp2-hybrid-flwf2" => (LossMode::Flwf2, StrategyMode::Hybrid, false),
        "exp3-exemplars-flwf1" => (LossMode::Flwf1, StrategyMode::Hybrid, true),
        "exp3-exemplars-flwf2" => (LossMode::Flwf2, StrategyMode::Hybrid, true),
        other => return Err(Error::UnknownPreset(other.into())),
    };
    for c in &mut cfg.clients {
        c.algo = algo;
        c.strategy.mode = mode;
        c.beta = (algo == LossMode::Flwf2).then_some(0.7);
        c.exemplars.enabled = exemplars;
    }
    cfg.validate()?;
    Ok(cfg)
}
