//! Server-side aggregation strategies.
//!
//! All six strategies consume the same inputs: the server state (global
//! parameters plus optimizer buffers) and one [`ClientUpdate`] per client.
//! Updates are sorted by client id before any arithmetic so the floating
//! point summation order never depends on arrival order.
//!
//! The averaging strategies are evaluated in pseudo-gradient form: the server
//! combines the client deltas `w_i - w` around the broadcast global `w`
//! instead of averaging raw parameters. Algebraically the two forms are
//! identical; the delta form has the practical property that clients equal to
//! the global leave it exactly unchanged, and it is what the
//! momentum/adaptive strategies are defined in terms of anyway.
//!
//! * `fedavg`: `w + sum(n_i * (w_i - w)) / sum(n_i)`, the sample-weighted mean.
//! * `fedavgm`: weighted pseudo-gradient `d = mean_n(w - w_i)` folded into a
//!   velocity `v <- beta * v + d`, then `w <- w - lr * v`.
//! * `fedmedian`: coordinate-wise median of the client parameters.
//! * `fedprox`: server side identical to `fedavg`; the proximal term acts in
//!   the client objective.
//! * `fedopt`: unweighted delta mean applied with a server learning rate,
//!   `w <- w + lr * mean(w_i - w)`.
//! * `fedyogi`: unweighted delta mean driving sign-controlled second-moment
//!   updates, `v <- v - (1 - b2) * d^2 * sign(v - d^2)`, with an Adam-style
//!   step `w <- w + lr * m / (sqrt(v) + tau)`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{init_params, train_local, ModelSpec, TrainConfig};
use crate::params::{coordinate_median, weighted_mean, ParameterSet};

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u64,
    /// Number of local training rows; weights the averaging strategies.
    pub sample_count: u64,
    pub params: ParameterSet,
    /// Mean training loss after the local pass, for reporting.
    pub train_loss: f64,
}

/// Aggregation strategy and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    FedAvg,
    FedAvgM { beta: f64, server_lr: f64 },
    FedMedian,
    FedProx { prox_mu: f64 },
    FedOpt { server_lr: f64 },
    FedYogi { server_lr: f64, beta1: f64, beta2: f64, tau: f64 },
}

impl StrategyConfig {
    /// FedYogi with its customary defaults.
    pub fn fed_yogi_default() -> Self {
        Self::FedYogi { server_lr: 0.01, beta1: 0.9, beta2: 0.99, tau: 0.001 }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedAvgM { .. } => "fedavgm",
            Self::FedMedian => "fedmedian",
            Self::FedProx { .. } => "fedprox",
            Self::FedOpt { .. } => "fedopt",
            Self::FedYogi { .. } => "fedyogi",
        }
    }

    /// Proximal strength the clients should train with (zero for all
    /// strategies but `fedprox`).
    pub fn client_proximal_mu(&self) -> f64 {
        match self {
            Self::FedProx { prox_mu } => *prox_mu,
            _ => 0.0,
        }
    }

    /// Whether the strategy needs pretrained initial parameters to anchor its
    /// optimizer buffers.
    pub fn needs_pretrained_start(&self) -> bool {
        match self {
            Self::FedAvgM { beta, .. } => *beta > 0.0,
            Self::FedOpt { .. } | Self::FedYogi { .. } => true,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        let check_positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Self::FedAvg | Self::FedMedian => Ok(()),
            Self::FedAvgM { beta, server_lr } => {
                check_unit("beta", *beta)?;
                check_positive("server_lr", *server_lr)
            }
            Self::FedProx { prox_mu } => {
                if prox_mu.is_finite() && *prox_mu >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("prox_mu must be non-negative, got {prox_mu}")))
                }
            }
            Self::FedOpt { server_lr } => check_positive("server_lr", *server_lr),
            Self::FedYogi { server_lr, beta1, beta2, tau } => {
                check_positive("server_lr", *server_lr)?;
                check_unit("beta1", *beta1)?;
                check_unit("beta2", *beta2)?;
                check_positive("tau", *tau)
            }
        }
    }
}

/// Global parameters plus the optimizer buffers that persist across rounds.
///
/// Buffers start at zero and are only advanced by the strategy that owns
/// them; `round` counts completed aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: u64,
    pub global: ParameterSet,
    /// FedAvgM velocity.
    pub momentum: ParameterSet,
    /// FedYogi first moment.
    pub first_moment: ParameterSet,
    /// FedYogi second moment.
    pub second_moment: ParameterSet,
}

impl ServerState {
    pub fn new(global: ParameterSet) -> Self {
        let momentum = global.zeros_like();
        let first_moment = global.zeros_like();
        let second_moment = global.zeros_like();
        Self { round: 0, global, momentum, first_moment, second_moment }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sorted_refs<'a>(updates: &'a [ClientUpdate], global: &ParameterSet) -> Result<Vec<&'a ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("no client updates"));
    }
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    for pair in refs.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Config(format!("duplicate client id {}", pair[0].client_id)));
        }
    }
    for update in &refs {
        if update.sample_count == 0 {
            return Err(Error::Config(format!(
                "client {} reported zero samples",
                update.client_id
            )));
        }
        if !global.same_shape(&update.params) {
            return Err(Error::ShapeMismatch {
                expected: "client parameters shaped like the global model".into(),
                got: format!("client {}", update.client_id),
            });
        }
    }
    Ok(refs)
}

/// Weighted mean of `sign * (params_i - global)` over the sorted updates.
fn delta_mean(
    global: &ParameterSet,
    updates: &[&ClientUpdate],
    weights: &[f64],
    from_global: bool,
) -> Result<ParameterSet> {
    let deltas: Vec<ParameterSet> = updates
        .iter()
        .map(|u| {
            if from_global {
                global.axpy(&u.params, 1.0, -1.0)
            } else {
                u.params.axpy(global, 1.0, -1.0)
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&ParameterSet> = deltas.iter().collect();
    weighted_mean(&refs, weights)
}

fn sample_weights(updates: &[&ClientUpdate]) -> Vec<f64> {
    updates.iter().map(|u| u.sample_count as f64).collect()
}

/// Runs one aggregation step and returns the new global parameters along
/// with the advanced server state (`state.round + 1`, buffers updated by the
/// strategies that own them).
pub fn aggregate(
    config: &StrategyConfig,
    state: &ServerState,
    updates: &[ClientUpdate],
) -> Result<(ParameterSet, ServerState)> {
    config.validate()?;
    let refs = sorted_refs(updates, &state.global)?;
    let mut next = state.clone();
    next.round = state.round + 1;

    let new_global = match config {
        StrategyConfig::FedAvg | StrategyConfig::FedProx { .. } => {
            let delta = delta_mean(&state.global, &refs, &sample_weights(&refs), false)?;
            state.global.axpy(&delta, 1.0, 1.0)?
        }
        StrategyConfig::FedMedian => {
            let sets: Vec<&ParameterSet> = refs.iter().map(|u| &u.params).collect();
            coordinate_median(&sets)?
        }
        StrategyConfig::FedAvgM { beta, server_lr } => {
            let pseudo_grad = delta_mean(&state.global, &refs, &sample_weights(&refs), true)?;
            next.momentum = state.momentum.zip_map(&pseudo_grad, |v, d| beta * v + d)?;
            state.global.axpy(&next.momentum, 1.0, -server_lr)?
        }
        StrategyConfig::FedOpt { server_lr } => {
            let delta = delta_mean(&state.global, &refs, &vec![1.0; refs.len()], false)?;
            state.global.axpy(&delta, 1.0, *server_lr)?
        }
        StrategyConfig::FedYogi { server_lr, beta1, beta2, tau } => {
            let delta = delta_mean(&state.global, &refs, &vec![1.0; refs.len()], false)?;
            next.first_moment =
                state.first_moment.zip_map(&delta, |m, d| beta1 * m + (1.0 - beta1) * d)?;
            next.second_moment = state.second_moment.zip_map(&delta, |v, d| {
                let d2 = d * d;
                v - (1.0 - beta2) * d2 * sign(v - d2)
            })?;
            let step = next
                .first_moment
                .zip_map(&next.second_moment, |m, v| server_lr * m / (v.sqrt() + tau))?;
            state.global.axpy(&step, 1.0, 1.0)?
        }
    };
    next.global = new_global.clone();
    Ok((new_global, next))
}

/// Initializes parameters and trains them on the server's validation split.
///
/// Strategies whose optimizer buffers integrate pseudo-gradients
/// ([`StrategyConfig::needs_pretrained_start`]) start from this instead of a
/// raw random initialization.
pub fn pretrain_initial(
    spec: &ModelSpec,
    validation: &LabeledDataset,
    config: &TrainConfig,
) -> Result<ParameterSet> {
    let params = init_params(spec, config.seed);
    train_local(&params, validation, config)
}
