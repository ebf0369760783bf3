//! The federated round loop: broadcast, local training, aggregation with
//! privacy, evaluation, and the client inference harness built on top.
//!
//! Everything here is deterministic in the experiment seed. Per-client
//! training seeds are derived from `(seed, client id, round)`, so clients can
//! train concurrently in any order, on any number of threads, without
//! changing a single bit of the result. Aggregation is a strict barrier
//! between rounds; all server-side steps run sequentially.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{
    partition_by_plan, partition_homogeneous, shadow_sample, stratified_split, LabeledDataset,
    PartitionPlan,
};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{evaluate, init_params, train_local, ModelSpec, TrainConfig};
use crate::params::ParameterSet;
use crate::privacy::{privatize_round_with_distance, PrivacyConfig, RoundPrivacyRecord};
use crate::seeds::derive_seed;
use crate::strategies::{pretrain_initial, ClientUpdate, ServerState, StrategyConfig};

/// How the training source is divided across clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// Near-identical class mixes across `num_clients` clients.
    Homogeneous { num_clients: usize },
    /// Explicit per-client per-class counts.
    Plan(PartitionPlan),
}

/// Dataset layout knobs for [`prepare_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenario: Scenario,
    /// Fraction of the training source held out as the server's evaluation
    /// pool when no separate evaluation source is given.
    pub eval_holdout: f64,
    /// Per-client fraction held out as that client's local test set.
    pub client_test_fraction: f64,
    /// Fraction of the evaluation pool carved out as the server validation
    /// split (used for pretraining); the remainder is the final test set.
    pub validation_fraction: f64,
}

impl DataConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            eval_holdout: 0.2,
            client_test_fraction: 0.2,
            validation_fraction: 0.5,
        }
    }
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// All datasets a run needs, fixed before the first round.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clients: Vec<ClientData>,
    /// Server-side split used to pretrain initial parameters.
    pub server_validation: LabeledDataset,
    /// Held-out split the final model is evaluated on.
    pub server_test: LabeledDataset,
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie strictly between 0 and 1, got {v}")))
    }
}

/// Builds the full data layout for a run.
///
/// The training source is partitioned per the scenario and each client holds
/// out a local test split. The server evaluation pool is either the separate
/// `eval_source` or a stratified holdout of the training source; half of it
/// (by default) becomes the pretraining validation split, the rest the final
/// test set. All shuffles derive from `seed`.
pub fn prepare_data(
    train_source: &LabeledDataset,
    eval_source: Option<&LabeledDataset>,
    config: &DataConfig,
    seed: u64,
) -> Result<PreparedData> {
    check_fraction("client test fraction", config.client_test_fraction)?;
    check_fraction("validation fraction", config.validation_fraction)?;

    let held;
    let (train_pool, eval_pool): (&LabeledDataset, &LabeledDataset) = match eval_source {
        Some(eval) => (train_source, eval),
        None => {
            check_fraction("evaluation holdout", config.eval_holdout)?;
            held = stratified_split(
                train_source,
                config.eval_holdout,
                derive_seed(seed, "holdout", &[]),
            )?;
            (&held.0, &held.1)
        }
    };

    let partition_seed = derive_seed(seed, "data", &[]);
    let parts = match &config.scenario {
        Scenario::Homogeneous { num_clients } => {
            partition_homogeneous(train_pool, *num_clients, partition_seed)?
        }
        Scenario::Plan(plan) => partition_by_plan(train_pool, plan, partition_seed)?,
    };

    let mut clients = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        let (train, test) = stratified_split(
            part,
            config.client_test_fraction,
            derive_seed(seed, "client_split", &[i as u64]),
        )?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config(format!(
                "client {i} is too small to hold out a test split"
            )));
        }
        clients.push(ClientData { train, test });
    }

    let (server_test, server_validation) = stratified_split(
        eval_pool,
        config.validation_fraction,
        derive_seed(seed, "server_split", &[]),
    )?;
    if server_validation.is_empty() || server_test.is_empty() {
        return Err(Error::Config("server evaluation pool is too small to split".into()));
    }
    Ok(PreparedData { clients, server_validation, server_test })
}

/// Everything a single run needs besides the data.
///
/// `train.seed` and `train.proximal_mu` are overwritten per client and round;
/// the experiment `seed` is the only randomness root.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub privacy: PrivacyConfig,
    /// Number of aggregation rounds.
    pub rounds: u64,
    /// Local pass hyperparameters shared by all clients.
    pub train: TrainConfig,
    pub seed: u64,
    /// Cap on concurrent client-training tasks; 0 uses the default pool.
    /// Never affects results.
    pub threads: usize,
    /// Explicit starting parameters; skips initialization and pretraining.
    pub initial_params: Option<ParameterSet>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("need at least one round".into()));
        }
        self.train.validate()?;
        self.strategy.validate()?;
        self.privacy.validate()?;
        if let Some(params) = &self.initial_params {
            let spec = crate::model::infer_spec(params)?;
            if spec != self.model {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", self.model),
                    got: format!("{spec:?}"),
                });
            }
        }
        Ok(())
    }
}

/// One client's test metrics against the freshly aggregated model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundMetrics {
    pub client_id: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Loss of the client's own trained model on its training split.
    pub train_loss: f64,
}

/// What one round produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u64,
    /// Client-test accuracy of the aggregated model, weighted by test size.
    pub agg_accuracy: f64,
    /// Client-test loss of the aggregated model, weighted by test size.
    pub agg_loss: f64,
    /// Per-client metrics in ascending client id order.
    pub clients: Vec<ClientRoundMetrics>,
    pub privacy: RoundPrivacyRecord,
}

/// A completed run: every round plus the final server-side evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// The final global model evaluated on the server test split.
    pub final_eval: EvalReport,
    pub final_params: ParameterSet,
}

fn in_round(round: u64, err: Error) -> Error {
    Error::Round { round, source: Box::new(err) }
}

fn train_clients(
    config: &ExperimentConfig,
    data: &PreparedData,
    global: &ParameterSet,
    round: u64,
) -> Result<Vec<ClientUpdate>> {
    data.clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let id = i as u64;
            let local = TrainConfig {
                seed: derive_seed(config.seed, "client", &[id, round]),
                proximal_mu: config.strategy.client_proximal_mu(),
                ..config.train.clone()
            };
            let params = train_local(global, &client.train, &local)?;
            let train_loss = evaluate(&params, &client.train)?.loss;
            Ok(ClientUpdate {
                client_id: id,
                sample_count: client.train.len() as u64,
                params,
                train_loss,
            })
        })
        .collect()
}

/// Test-size-weighted mean over per-client values, in client id order.
fn weighted_client_mean(values: &[f64], weights: &[u64]) -> f64 {
    let total: u64 = weights.iter().sum();
    let mut acc = 0.0;
    for (v, &w) in values.iter().zip(weights) {
        acc += w as f64 * v;
    }
    acc / total as f64
}

/// Runs the federated loop with a forced metric-mode distance. Test hook
/// behind [`run_experiment`]; `None` measures the distance normally.
pub fn run_experiment_with_distance(
    config: &ExperimentConfig,
    data: &PreparedData,
    distance_override: Option<f64>,
) -> Result<RunOutput> {
    config.validate()?;
    if data.clients.is_empty() {
        return Err(Error::EmptyInput("no clients"));
    }

    let initial = match &config.initial_params {
        Some(params) => params.clone(),
        None if config.strategy.needs_pretrained_start() => {
            let pretrain = TrainConfig {
                seed: derive_seed(config.seed, "pretrain", &[]),
                ..config.train.clone()
            };
            pretrain_initial(&config.model, &data.server_validation, &pretrain)?
        }
        None => init_params(&config.model, config.seed),
    };

    let pool = if config.threads > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut state = ServerState::new(initial);
    let mut records = Vec::with_capacity(config.rounds as usize);
    for round in 1..=config.rounds {
        let updates = match &pool {
            Some(pool) => pool.install(|| train_clients(config, data, &state.global, round)),
            None => train_clients(config, data, &state.global, round),
        }
        .map_err(|e| in_round(round, e))?;

        let (global, next, privacy) = privatize_round_with_distance(
            &config.privacy,
            &config.strategy,
            &state,
            &updates,
            distance_override,
        )
        .map_err(|e| in_round(round, e))?;

        let mut clients = Vec::with_capacity(updates.len());
        for (update, client) in updates.iter().zip(&data.clients) {
            let report = evaluate(&global, &client.test).map_err(|e| in_round(round, e))?;
            clients.push(ClientRoundMetrics {
                client_id: update.client_id,
                test_accuracy: report.accuracy,
                test_loss: report.loss,
                train_loss: update.train_loss,
            });
        }
        let weights: Vec<u64> = data.clients.iter().map(|c| c.test.len() as u64).collect();
        let accs: Vec<f64> = clients.iter().map(|c| c.test_accuracy).collect();
        let losses: Vec<f64> = clients.iter().map(|c| c.test_loss).collect();
        records.push(RoundRecord {
            round,
            agg_accuracy: weighted_client_mean(&accs, &weights),
            agg_loss: weighted_client_mean(&losses, &weights),
            clients,
            privacy,
        });
        state = next;
    }

    let final_eval = evaluate(&state.global, &data.server_test)?;
    Ok(RunOutput { records, final_eval, final_params: state.global })
}

/// Runs the full federated loop: for each round, broadcast the global
/// model, train every client locally, aggregate under the privacy
/// configuration, and evaluate the new global model on every client's test
/// split. The final model is evaluated on the server test split.
///
/// Bit-reproducible: the same config and data always produce the same
/// output, regardless of `threads`.
pub fn run_experiment(config: &ExperimentConfig, data: &PreparedData) -> Result<RunOutput> {
    run_experiment_with_distance(config, data, None)
}

/// Incremental mean, exact for constant input.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    for (k, &v) in values.iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    let mut acc = 0.0;
    for &v in values {
        acc += (v - mean) * (v - mean);
    }
    (mean, (acc / values.len() as f64).sqrt())
}

/// Mean and population standard deviation of the aggregated accuracy over
/// the last `k` rounds.
pub fn summarize_last_k(records: &[RoundRecord], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Config("need a positive window".into()));
    }
    if records.len() < k {
        return Err(Error::Config(format!(
            "need at least {k} rounds to summarize, got {}",
            records.len()
        )));
    }
    let tail: Vec<f64> = records[records.len() - k..].iter().map(|r| r.agg_accuracy).collect();
    Ok(mean_std(&tail))
}

/// Final test accuracy across several reseeded runs of the same experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiRunReport {
    /// One final server-test accuracy per run, in run order.
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Repeats the experiment under `num_seeds` derived seeds on the same fixed
/// data and reports the spread of the final test accuracy.
pub fn multi_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    num_seeds: usize,
) -> Result<MultiRunReport> {
    if num_seeds < 2 {
        return Err(Error::Config(format!("need at least two runs, got {num_seeds}")));
    }
    let mut final_accuracies = Vec::with_capacity(num_seeds);
    for k in 0..num_seeds {
        let run_config = ExperimentConfig {
            seed: derive_seed(config.seed, "run", &[k as u64]),
            ..config.clone()
        };
        let output = run_experiment(&run_config, data)?;
        final_accuracies.push(output.final_eval.accuracy);
    }
    let (mean_accuracy, std_accuracy) = mean_std(&final_accuracies);
    Ok(MultiRunReport { final_accuracies, mean_accuracy, std_accuracy })
}

/// Client inference attack setup: which client is probed and how big the
/// attacker's shadow sample of its training data is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiaConfig {
    pub attacker_id: usize,
    pub target_id: usize,
    /// Fraction of the target's training split sampled as the shadow set.
    pub shadow_fraction: f64,
}

impl CiaConfig {
    pub fn new(attacker_id: usize, target_id: usize) -> Self {
        Self { attacker_id, target_id, shadow_fraction: 0.1 }
    }
}

/// Outcome of a client inference attack round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiaReport {
    /// Loss of the aggregated model over the clients' test splits.
    pub aggregated_test_loss: f64,
    /// Loss of the aggregated model on the shadow sample of the target.
    pub target_shadow_loss: f64,
    /// How much worse the shadow set fares, relative to itself, in percent.
    pub relative_difference_pct: f64,
    pub shadow_size: usize,
}

/// The attack statistic: by how many percent the aggregated test loss
/// undercuts the shadow loss, relative to the shadow loss. Near zero means
/// the aggregate behaves like the target's data, which reveals the target's
/// participation.
pub fn relative_difference_pct(aggregated_loss: f64, shadow_loss: f64) -> f64 {
    (shadow_loss - aggregated_loss) / shadow_loss * 100.0
}

/// Runs the one-round client inference attack.
///
/// A semi-honest client holds a shadow sample of the target's training data.
/// After the single aggregation round it compares the server-shared
/// aggregated test loss against the aggregated model's loss on the shadow
/// sample. `config.rounds` is ignored; the attack reads round one, where the
/// aggregate is most shaped by individual clients.
pub fn run_cia(
    config: &ExperimentConfig,
    data: &PreparedData,
    cia: &CiaConfig,
) -> Result<CiaReport> {
    if data.clients.len() != 3 {
        return Err(Error::Config(format!(
            "client inference scenario needs exactly 3 clients, got {}",
            data.clients.len()
        )));
    }
    if cia.attacker_id == cia.target_id {
        return Err(Error::Config("attacker and target must be distinct clients".into()));
    }
    if cia.attacker_id >= data.clients.len() || cia.target_id >= data.clients.len() {
        return Err(Error::Config(format!(
            "attacker {} or target {} out of range for 3 clients",
            cia.attacker_id, cia.target_id
        )));
    }

    let one_round = ExperimentConfig { rounds: 1, ..config.clone() };
    let output = run_experiment(&one_round, data)?;
    let record = &output.records[0];

    let shadow = shadow_sample(
        &data.clients[cia.target_id].train,
        cia.shadow_fraction,
        derive_seed(config.seed, "shadow", &[]),
    )?;
    let target_shadow_loss = evaluate(&output.final_params, &shadow)?.loss;
    if !(target_shadow_loss > 0.0) {
        return Err(Error::Config(format!(
            "shadow loss must be positive to compare against, got {target_shadow_loss}"
        )));
    }
    Ok(CiaReport {
        aggregated_test_loss: record.agg_loss,
        target_shadow_loss,
        relative_difference_pct: relative_difference_pct(record.agg_loss, target_shadow_loss),
        shadow_size: shadow.len(),
    })
}
