//! The experiment config file and its command-line overrides.
//!
//! Configs are TOML with five tables: `[model]`, `[data]`, `[strategy]`,
//! `[privacy]`, and `[run]`. Every hyperparameter has a default, so an empty
//! file is a valid experiment. `--set table.key=value` rewrites the parsed
//! file before validation; the dedicated `--seed` and `--threads` flags win
//! over both.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use fedsim::data::{load_csv, synth_blobs, LabeledDataset, PartitionPlan};
use fedsim::model::{ModelSpec, Optimizer, TrainConfig};
use fedsim::orchestrator::{DataConfig, ExperimentConfig, Scenario};
use fedsim::privacy::{PrivacyConfig, PrivacyMode};
use fedsim::strategies::StrategyConfig;
use fedsim::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTable {
    /// Feature width; inferred from the dataset when absent.
    pub input_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    /// Class count; inferred from the dataset when absent.
    pub num_classes: Option<usize>,
}

impl Default for ModelTable {
    fn default() -> Self {
        Self { input_dim: None, hidden_dims: vec![32], num_classes: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataTable {
    /// `"synth"` for generated blobs, or a path to a `.csv` / binary file.
    pub source: String,
    /// Skip one header line when reading CSV sources.
    pub has_header: bool,
    /// Optional separate evaluation pool (path); defaults to a stratified
    /// holdout of the training source.
    pub eval_source: Option<String>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_per_class: usize,
    pub synth_spread: f64,
    /// `"homogeneous"` or `"plan"`.
    pub scenario: String,
    pub num_clients: usize,
    /// Per-client per-class row counts; required when scenario is `"plan"`.
    pub plan: Option<Vec<Vec<usize>>>,
    pub eval_holdout: f64,
    pub client_test_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DataTable {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            has_header: false,
            eval_source: None,
            synth_classes: 4,
            synth_dim: 16,
            synth_per_class: 1000,
            synth_spread: 1.5,
            scenario: "homogeneous".into(),
            num_clients: 4,
            plan: None,
            eval_holdout: 0.2,
            client_test_fraction: 0.2,
            validation_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyTable {
    /// One of `fedavg`, `fedavgm`, `fedmedian`, `fedprox`, `fedopt`,
    /// `fedyogi`.
    pub kind: String,
    /// FedAvgM momentum factor.
    pub beta: f64,
    /// Server step size for FedAvgM, FedOpt, and FedYogi. Defaults to 1.0
    /// for the first two and 0.01 for FedYogi.
    pub server_lr: Option<f64>,
    /// FedProx proximal strength, forwarded into client training.
    pub prox_mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for StrategyTable {
    fn default() -> Self {
        Self {
            kind: "fedavg".into(),
            beta: 0.9,
            server_lr: None,
            prox_mu: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.001,
        }
    }
}

impl StrategyTable {
    pub fn strategy(&self) -> Result<StrategyConfig> {
        Ok(match self.kind.as_str() {
            "fedavg" | "fed_avg" => StrategyConfig::FedAvg,
            "fedavgm" | "fed_avgm" => StrategyConfig::FedAvgM {
                beta: self.beta,
                server_lr: self.server_lr.unwrap_or(1.0),
            },
            "fedmedian" | "fed_median" => StrategyConfig::FedMedian,
            "fedprox" | "fed_prox" => StrategyConfig::FedProx { prox_mu: self.prox_mu },
            "fedopt" | "fed_opt" => {
                StrategyConfig::FedOpt { server_lr: self.server_lr.unwrap_or(1.0) }
            }
            "fedyogi" | "fed_yogi" => StrategyConfig::FedYogi {
                server_lr: self.server_lr.unwrap_or(0.01),
                beta1: self.beta1,
                beta2: self.beta2,
                tau: self.tau,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy kind {other:?} (expected fedavg, fedavgm, \
                     fedmedian, fedprox, fedopt, or fedyogi)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyTable {
    pub mode: PrivacyMode,
    pub noise_multiplier: f64,
    pub clipping_norm: f64,
    /// Client count the noise is calibrated for; defaults to the actual
    /// number of clients.
    pub sampled_clients: Option<u64>,
    /// Base seed of the noise streams; defaults to the run seed.
    pub noise_seed: Option<u64>,
}

impl Default for PrivacyTable {
    fn default() -> Self {
        Self {
            mode: PrivacyMode::None,
            noise_multiplier: 0.01,
            clipping_norm: 5.0,
            sampled_clients: None,
            noise_seed: None,
        }
    }
}

impl PrivacyTable {
    pub fn privacy(&self, num_clients: u64, seed: u64) -> PrivacyConfig {
        PrivacyConfig {
            mode: self.mode,
            noise_multiplier: self.noise_multiplier,
            clipping_norm: self.clipping_norm,
            sampled_clients: self.sampled_clients.unwrap_or(num_clients),
            noise_seed: self.noise_seed.unwrap_or(seed),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunTable {
    pub rounds: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `"sgd"` or `"adaptive_moment"`.
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Cap on concurrent client-training tasks; 0 uses the default pool.
    pub threads: usize,
    pub attacker_id: usize,
    pub target_id: usize,
    pub shadow_fraction: f64,
    /// Privacy modes the `cia` command sweeps over.
    pub cia_modes: Vec<PrivacyMode>,
}

impl Default for RunTable {
    fn default() -> Self {
        Self {
            rounds: 20,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoment,
            seed: 42,
            threads: 0,
            attacker_id: 0,
            target_id: 2,
            shadow_fraction: 0.1,
            cia_modes: vec![PrivacyMode::None, PrivacyMode::GlobalDp, PrivacyMode::Metric],
        }
    }
}

/// The parsed config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelTable,
    pub data: DataTable,
    pub strategy: StrategyTable,
    pub privacy: PrivacyTable,
    pub run: RunTable,
}

/// Reads `path`, applies `--set` overrides, and validates the schema.
pub fn load_config(path: &Path, sets: &[String]) -> Result<FileConfig> {
    let text = fs::read_to_string(path)?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for set in sets {
        apply_override(&mut value, set)?;
    }
    value
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Applies one `table.key=value` override to the parsed config.
///
/// The value is parsed as TOML (numbers, booleans, arrays); anything that
/// does not parse is taken as a bare string, so `--set privacy.mode=metric`
/// works without quoting.
fn apply_override(root: &mut toml::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {set:?} must look like table.key=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} has an empty segment")));
    }
    let parsed = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut current = root;
    for segment in &segments[..segments.len() - 1] {
        current = current
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key {path:?} descends into a non-table"))
            })?
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    current
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key {path:?} descends into a non-table")))?
        .insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// Loads a dataset named by `spec`: the literal `"synth"` generates blobs
/// from the `[data]` synth knobs and `seed`; a `.csv` suffix reads CSV;
/// anything else reads the binary format.
pub fn load_dataset(spec: &str, data: &DataTable, seed: u64) -> Result<LabeledDataset> {
    if spec == "synth" {
        synth_blobs(
            data.synth_classes,
            data.synth_dim,
            data.synth_per_class,
            data.synth_spread,
            seed,
        )
    } else if spec.ends_with(".csv") {
        load_csv(spec, data.has_header)
    } else {
        LabeledDataset::load(spec)
    }
}

impl FileConfig {
    pub fn train_source(&self, seed: u64) -> Result<LabeledDataset> {
        load_dataset(&self.data.source, &self.data, seed)
    }

    pub fn eval_source(&self) -> Result<Option<LabeledDataset>> {
        match &self.data.eval_source {
            None => Ok(None),
            Some(spec) if spec == "synth" => Err(Error::Config(
                "data.eval_source must be a file path, not \"synth\"".into(),
            )),
            Some(spec) => Ok(Some(load_dataset(spec, &self.data, 0)?)),
        }
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let scenario = match self.data.scenario.as_str() {
            "homogeneous" => Scenario::Homogeneous { num_clients: self.data.num_clients },
            "plan" => {
                let counts = self.data.plan.clone().ok_or_else(|| {
                    Error::Config("scenario \"plan\" needs a data.plan count matrix".into())
                })?;
                Scenario::Plan(PartitionPlan::new(counts)?)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario {other:?} (expected homogeneous or plan)"
                )))
            }
        };
        Ok(DataConfig {
            scenario,
            eval_holdout: self.data.eval_holdout,
            client_test_fraction: self.data.client_test_fraction,
            validation_fraction: self.data.validation_fraction,
        })
    }

    /// Model spec against the data's observed width and class count. An
    /// explicit `num_classes` may exceed the observed one (a split may miss
    /// the top class) but never undercut it.
    pub fn model_spec(&self, width: usize, num_classes: usize) -> Result<ModelSpec> {
        if let Some(dim) = self.model.input_dim {
            if dim != width {
                return Err(Error::Config(format!(
                    "model.input_dim is {dim} but the data has {width} features"
                )));
            }
        }
        let classes = self.model.num_classes.unwrap_or(num_classes);
        if classes < num_classes {
            return Err(Error::Config(format!(
                "model.num_classes is {classes} but the data has {num_classes} classes"
            )));
        }
        ModelSpec::new(width, self.model.hidden_dims.clone(), classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.run.epochs,
            batch_size: self.run.batch_size,
            learning_rate: self.run.learning_rate,
            optimizer: self.run.optimizer,
            // Both rewritten per client and round by the orchestrator.
            proximal_mu: 0.0,
            seed: 0,
        }
    }

    pub fn experiment(
        &self,
        model: ModelSpec,
        num_clients: u64,
        seed: u64,
        threads: usize,
    ) -> Result<ExperimentConfig> {
        let config = ExperimentConfig {
            model,
            strategy: self.strategy.strategy()?,
            privacy: self.privacy.privacy(num_clients, seed),
            rounds: self.run.rounds,
            train: self.train_config(),
            seed,
            threads,
            initial_params: None,
        };
        config.validate()?;
        Ok(config)
    }
}
