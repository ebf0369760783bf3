//! Server-side privacy: update clipping, Gaussian noise, and the
//! distance-scaled metric variant.
//!
//! In the two private modes every client update is first clipped so its
//! delta from the broadcast global stays within `clipping_norm`, then
//! aggregated, then perturbed with zero-mean Gaussian noise added to every
//! coordinate of the aggregate.
//!
//! The noise standard deviation is calibrated as
//!
//! ```text
//! global_dp:  sigma = noise_multiplier * clipping_norm / sampled_clients
//! metric:     sigma = noise_multiplier * clipping_norm / (sampled_clients * d)
//! ```
//!
//! where `d` is the largest layer-mean Frobenius distance between any two
//! clipped client models in the round. Rounds where the clients coincide
//! (`d = 0`) fall back to zero noise and raise a warning flag instead of
//! dividing by zero; a round where `d = 1` is by construction
//! indistinguishable from plain global DP.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::seeds;
use crate::strategies::{aggregate, ClientUpdate, ServerState, StrategyConfig};

/// Privacy operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    None,
    GlobalDp,
    Metric,
}

impl PrivacyMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GlobalDp => "global_dp",
            Self::Metric => "metric",
        }
    }
}

/// Noise and clipping configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyConfig {
    pub mode: PrivacyMode,
    /// Noise multiplier; larger means more noise (the inverse of a budget).
    pub noise_multiplier: f64,
    /// Upper bound on the L2 norm of a client's parameter delta.
    pub clipping_norm: f64,
    /// Client count the noise is calibrated for.
    pub sampled_clients: u64,
    /// Base seed of the per-round noise streams.
    pub noise_seed: u64,
}

impl PrivacyConfig {
    /// Vanilla configuration: no clipping, no noise.
    pub fn none() -> Self {
        Self {
            mode: PrivacyMode::None,
            noise_multiplier: 0.0,
            clipping_norm: 1.0,
            sampled_clients: 1,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PrivacyMode::None {
            return Ok(());
        }
        if !self.noise_multiplier.is_finite() || self.noise_multiplier < 0.0 {
            return Err(Error::Config(format!(
                "noise multiplier must be finite and non-negative, got {}",
                self.noise_multiplier
            )));
        }
        if !self.clipping_norm.is_finite() || self.clipping_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clipping norm must be positive, got {}",
                self.clipping_norm
            )));
        }
        if self.sampled_clients == 0 {
            return Err(Error::Config("sampled client count must be positive".into()));
        }
        Ok(())
    }
}

/// Privacy bookkeeping for one aggregation round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundPrivacyRecord {
    pub round: u64,
    /// Inter-client distance the noise was scaled by; 1.0 outside metric mode.
    pub distance: f64,
    /// Standard deviation of the Gaussian noise added this round.
    pub sigma: f64,
    /// Largest pairwise L2 distance between raw client models; recorded in
    /// the first round only as a clipping-norm diagnostic.
    pub ctilde: Option<f64>,
    /// Set when metric mode measured a zero distance and skipped the noise.
    pub zero_distance_warning: bool,
}

/// Clips `client` so that its delta from `global` has L2 norm at most
/// `clipping_norm`. Updates already inside the bound pass through unchanged.
///
/// The postcondition holds for the *reconstructed* delta `result - global`:
/// rescaling and re-adding to the anchor can leave that a few ulps above the
/// bound, so the scale backs off geometrically until the reconstructed norm
/// fits. That makes the operation exactly idempotent.
pub fn clip_update(
    global: &ParameterSet,
    client: &ParameterSet,
    clipping_norm: f64,
) -> Result<ParameterSet> {
    if !clipping_norm.is_finite() || clipping_norm <= 0.0 {
        return Err(Error::Config(format!(
            "clipping norm must be positive, got {clipping_norm}"
        )));
    }
    let delta = client.axpy(global, 1.0, -1.0)?;
    let norm = delta.l2_norm();
    if norm <= clipping_norm {
        return Ok(client.clone());
    }
    let mut scale = clipping_norm / norm;
    let mut backoff = 1e-12;
    for _ in 0..64 {
        let candidate = global.axpy(&delta, 1.0, scale)?;
        let reconstructed = candidate.axpy(global, 1.0, -1.0)?;
        if reconstructed.l2_norm() <= clipping_norm {
            return Ok(candidate);
        }
        scale *= 1.0 - backoff;
        backoff *= 2.0;
    }
    // Unreachable for sane magnitudes; a zero delta always satisfies the bound.
    Ok(global.clone())
}

fn check_pairwise_input(sets: &[&ParameterSet]) -> Result<()> {
    if sets.len() < 2 {
        return Err(Error::TooFewSets(sets.len()));
    }
    Ok(())
}

/// Largest pairwise L2 distance between the given parameter sets. Reported
/// in round one as a guide for choosing the clipping norm.
pub fn compute_ctilde(sets: &[&ParameterSet]) -> Result<f64> {
    check_pairwise_input(sets)?;
    let mut max = 0.0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let d = sets[i].axpy(sets[j], 1.0, -1.0)?.l2_norm();
            if d > max {
                max = d;
            }
        }
    }
    Ok(max)
}

/// Largest pairwise layer-mean Frobenius distance between the sets; the
/// `d` that rescales the metric-mode noise.
pub fn compute_distance(sets: &[&ParameterSet]) -> Result<f64> {
    check_pairwise_input(sets)?;
    let mut max = 0.0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let d = sets[i].frobenius_layer_mean_distance(sets[j])?;
            if d > max {
                max = d;
            }
        }
    }
    Ok(max)
}

/// Noise standard deviation for the configured mode at inter-client
/// distance `d`. Metric mode requires `d > 0`; the zero-distance fallback is
/// handled by [`privatize_round`] before calling this.
pub fn noise_stddev(config: &PrivacyConfig, distance: f64) -> Result<f64> {
    match config.mode {
        PrivacyMode::None => Ok(0.0),
        PrivacyMode::GlobalDp => {
            Ok(config.noise_multiplier * config.clipping_norm / config.sampled_clients as f64)
        }
        PrivacyMode::Metric => {
            if !distance.is_finite() || distance <= 0.0 {
                return Err(Error::NonPositiveDistance(distance));
            }
            Ok(config.noise_multiplier * config.clipping_norm
                / (config.sampled_clients as f64 * distance))
        }
    }
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate. A zero sigma
/// returns the input bit-for-bit without consuming randomness.
pub fn add_gaussian_noise(
    params: &ParameterSet,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ParameterSet> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise standard deviation must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(params.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    Ok(params.map(|v| v + normal.sample(rng)))
}

/// Runs the full privatized aggregation for one round: clip every update,
/// measure the inter-client distance (metric mode), aggregate, then add
/// calibrated noise to the new global model. The returned state broadcasts
/// the noised parameters next round.
///
/// `mode = none` skips clipping and noise entirely and equals
/// [`aggregate`] bit-for-bit.
pub fn privatize_round(
    privacy: &PrivacyConfig,
    strategy: &StrategyConfig,
    state: &ServerState,
    updates: &[ClientUpdate],
) -> Result<(ParameterSet, ServerState, RoundPrivacyRecord)> {
    privatize_round_with_distance(privacy, strategy, state, updates, None)
}

/// [`privatize_round`] with the measured metric-mode distance replaced by
/// `distance_override`. This is a test hook: forcing `d = 1` must make a
/// metric run coincide bit-for-bit with a global-DP run under shared seeds.
pub fn privatize_round_with_distance(
    privacy: &PrivacyConfig,
    strategy: &StrategyConfig,
    state: &ServerState,
    updates: &[ClientUpdate],
    distance_override: Option<f64>,
) -> Result<(ParameterSet, ServerState, RoundPrivacyRecord)> {
    privacy.validate()?;
    if updates.is_empty() {
        return Err(Error::EmptyInput("no client updates"));
    }
    let round = state.round + 1;
    let ctilde = if round == 1 && updates.len() >= 2 {
        let raw: Vec<&ParameterSet> = updates.iter().map(|u| &u.params).collect();
        Some(compute_ctilde(&raw)?)
    } else {
        None
    };

    if privacy.mode == PrivacyMode::None {
        let (global, next) = aggregate(strategy, state, updates)?;
        let record = RoundPrivacyRecord {
            round,
            distance: 1.0,
            sigma: 0.0,
            ctilde,
            zero_distance_warning: false,
        };
        return Ok((global, next, record));
    }

    let clipped: Vec<ClientUpdate> = updates
        .iter()
        .map(|u| {
            Ok(ClientUpdate {
                params: clip_update(&state.global, &u.params, privacy.clipping_norm)?,
                ..u.clone()
            })
        })
        .collect::<Result<_>>()?;

    let distance = if privacy.mode == PrivacyMode::Metric {
        match distance_override {
            Some(d) => d,
            None => {
                let sets: Vec<&ParameterSet> = clipped.iter().map(|u| &u.params).collect();
                compute_distance(&sets)?
            }
        }
    } else {
        1.0
    };

    let (sigma, zero_distance_warning) = if privacy.mode == PrivacyMode::Metric && distance == 0.0
    {
        (0.0, true)
    } else {
        (noise_stddev(privacy, distance)?, false)
    };

    let (aggregated, mut next) = aggregate(strategy, state, &clipped)?;
    let mut rng = seeds::derive_rng(privacy.noise_seed, "noise", &[round]);
    let noised = add_gaussian_noise(&aggregated, sigma, &mut rng)?;
    next.global = noised.clone();
    let record =
        RoundPrivacyRecord { round, distance, sigma, ctilde, zero_distance_warning };
    Ok((noised, next, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn set(values: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![(
            "w".into(),
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        )])
        .unwrap()
    }

    fn update(id: u64, params: ParameterSet) -> ClientUpdate {
        ClientUpdate { client_id: id, sample_count: 4, params, train_loss: 0.0 }
    }

    fn dp_config(mode: PrivacyMode) -> PrivacyConfig {
        PrivacyConfig {
            mode,
            noise_multiplier: 0.01,
            clipping_norm: 5.0,
            sampled_clients: 4,
            noise_seed: 99,
        }
    }

    fn random_set(rng: &mut impl Rng, scale: f64) -> ParameterSet {
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-scale..scale)).collect();
        ParameterSet::new(vec![
            ("w".into(), Tensor::new(vec![3, 4], w).unwrap()),
            ("b".into(), Tensor::new(vec![5], b).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn clip_passes_through_updates_inside_the_bound() {
        let global = set(&[0.0, 0.0]);
        let client = set(&[3.0, 4.0]);
        let clipped = clip_update(&global, &client, 5.0).unwrap();
        assert_eq!(clipped, client);
        assert_eq!(clip_update(&global, &global, 1.0).unwrap(), global);
    }

    #[test]
    fn clip_halves_a_double_length_delta() {
        let global = set(&[0.0, 0.0]);
        let client = set(&[6.0, 8.0]);
        let clipped = clip_update(&global, &client, 5.0).unwrap();
        assert_eq!(clipped.layers()[0].1.values(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_norm_bound_and_idempotence() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[0]);
        for _ in 0..200 {
            let global = random_set(&mut rng, 8.0);
            let client = random_set(&mut rng, 8.0);
            let c = rng.gen_range(0.1..10.0);
            let once = clip_update(&global, &client, c).unwrap();
            let reconstructed = once.axpy(&global, 1.0, -1.0).unwrap();
            assert!(reconstructed.l2_norm() <= c + 1e-12);
            let twice = clip_update(&global, &once, c).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn ctilde_is_the_max_pairwise_l2() {
        let a = set(&[0.0, 0.0]);
        let b = set(&[3.0, 4.0]);
        let c = set(&[0.0, 1.0]);
        assert_eq!(compute_ctilde(&[&a, &a]).unwrap(), 0.0);
        assert_eq!(compute_ctilde(&[&a, &b]).unwrap(), 5.0);
        // pairs: ab = 5, ac = 1, bc = sqrt(9 + 9)
        assert_eq!(compute_ctilde(&[&a, &b, &c]).unwrap(), 5.0);
        assert!(matches!(compute_ctilde(&[&a]), Err(Error::TooFewSets(1))));
    }

    #[test]
    fn distance_is_the_max_pairwise_layer_mean() {
        let a = set(&[0.0, 0.0]);
        let b = set(&[3.0, 4.0]);
        let c = set(&[0.0, 1.0]);
        assert_eq!(compute_distance(&[&a, &b, &c]).unwrap(), 5.0);
    }

    #[test]
    fn single_layer_distance_equals_ctilde() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[1]);
        for _ in 0..10 {
            let a = set(&(0..6).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
            let b = set(&(0..6).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
            assert_eq!(
                compute_distance(&[&a, &b]).unwrap(),
                compute_ctilde(&[&a, &b]).unwrap()
            );
        }
    }

    #[test]
    fn stddev_formulas() {
        assert_eq!(noise_stddev(&PrivacyConfig::none(), 1.0).unwrap(), 0.0);
        let global = dp_config(PrivacyMode::GlobalDp);
        assert_relative_eq!(noise_stddev(&global, 1.0).unwrap(), 0.0125, max_relative = 1e-12);
        let metric = dp_config(PrivacyMode::Metric);
        assert_relative_eq!(noise_stddev(&metric, 0.5).unwrap(), 0.025, max_relative = 1e-12);
        assert_relative_eq!(noise_stddev(&metric, 1.0).unwrap(), 0.0125, max_relative = 1e-12);
        let silent = PrivacyConfig { noise_multiplier: 0.0, ..global };
        assert_eq!(noise_stddev(&silent, 1.0).unwrap(), 0.0);
        assert!(matches!(
            noise_stddev(&metric, 0.0),
            Err(Error::NonPositiveDistance(_))
        ));
    }

    #[test]
    fn metric_stddev_times_distance_recovers_global_stddev() {
        let global = dp_config(PrivacyMode::GlobalDp);
        let metric = dp_config(PrivacyMode::Metric);
        let sigma_global = noise_stddev(&global, 1.0).unwrap();
        let mut rng = crate::seeds::derive_rng(71, "test", &[2]);
        for _ in 0..100 {
            let d = rng.gen_range(1e-3..1e3);
            let sigma_metric = noise_stddev(&metric, d).unwrap();
            assert_relative_eq!(sigma_metric * d, sigma_global, max_relative = 1e-15);
        }
    }

    #[test]
    fn zero_sigma_noise_is_bitwise_identity() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[3]);
        let params = random_set(&mut rng, 2.0);
        let noised = add_gaussian_noise(&params, 0.0, &mut rng).unwrap();
        assert_eq!(noised, params);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let params = set(&[0.0; 16]);
        let mut rng1 = crate::seeds::derive_rng(5, "noise", &[1]);
        let mut rng2 = crate::seeds::derive_rng(5, "noise", &[1]);
        let mut rng3 = crate::seeds::derive_rng(5, "noise", &[2]);
        let a = add_gaussian_noise(&params, 0.3, &mut rng1).unwrap();
        let b = add_gaussian_noise(&params, 0.3, &mut rng2).unwrap();
        let c = add_gaussian_noise(&params, 0.3, &mut rng3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_sample_statistics_match_sigma() {
        let n = 200_000;
        let params = ParameterSet::new(vec![(
            "w".into(),
            Tensor::new(vec![n], vec![0.0; n]).unwrap(),
        )])
        .unwrap();
        let mut rng = crate::seeds::derive_rng(71, "test", &[4]);
        let sigma = 0.0125;
        let noised = add_gaussian_noise(&params, sigma, &mut rng).unwrap();
        let values = noised.layers()[0].1.values();
        let mean: f64 = values.iter().sum::<f64>() / n as f64;
        let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert_relative_eq!(var.sqrt(), sigma, max_relative = 0.02);
    }

    #[test]
    fn vanilla_mode_equals_plain_aggregate() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[5]);
        let state = ServerState::new(random_set(&mut rng, 1.0));
        let updates: Vec<ClientUpdate> =
            (0..3).map(|i| update(i, random_set(&mut rng, 1.0))).collect();
        let strategy = StrategyConfig::FedAvg;
        let (plain, _) = aggregate(&strategy, &state, &updates).unwrap();
        let (privatized, next, record) =
            privatize_round(&PrivacyConfig::none(), &strategy, &state, &updates).unwrap();
        assert_eq!(privatized, plain);
        assert_eq!(next.global, plain);
        assert_eq!(record.sigma, 0.0);
        assert_eq!(record.distance, 1.0);
        assert!(record.ctilde.is_some());
        assert!(!record.zero_distance_warning);
    }

    #[test]
    fn identical_clients_trigger_zero_distance_warning() {
        let global = set(&[0.5, -0.5]);
        let state = ServerState::new(global.clone());
        let updates = vec![update(0, global.clone()), update(1, global.clone())];
        let (privatized, _, record) = privatize_round(
            &dp_config(PrivacyMode::Metric),
            &StrategyConfig::FedAvg,
            &state,
            &updates,
        )
        .unwrap();
        assert!(record.zero_distance_warning);
        assert_eq!(record.sigma, 0.0);
        assert_eq!(record.distance, 0.0);
        assert_eq!(privatized, global);
    }

    #[test]
    fn unit_distance_override_makes_metric_match_global_dp() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[6]);
        let state = ServerState::new(random_set(&mut rng, 1.0));
        let updates: Vec<ClientUpdate> =
            (0..3).map(|i| update(i, random_set(&mut rng, 1.0))).collect();
        let strategy = StrategyConfig::FedAvg;
        let (g_out, _, g_rec) = privatize_round(
            &dp_config(PrivacyMode::GlobalDp),
            &strategy,
            &state,
            &updates,
        )
        .unwrap();
        let (m_out, _, m_rec) = privatize_round_with_distance(
            &dp_config(PrivacyMode::Metric),
            &strategy,
            &state,
            &updates,
            Some(1.0),
        )
        .unwrap();
        assert_eq!(g_out, m_out);
        assert_eq!(g_rec.sigma, m_rec.sigma);
    }

    #[test]
    fn clipping_pulls_far_updates_toward_the_global() {
        let state = ServerState::new(set(&[0.0, 0.0]));
        let updates = vec![update(0, set(&[8.0, 6.0])), update(1, set(&[0.0, 0.0]))];
        let config = PrivacyConfig {
            noise_multiplier: 0.0,
            clipping_norm: 5.0,
            ..dp_config(PrivacyMode::GlobalDp)
        };
        let (privatized, _, record) =
            privatize_round(&config, &StrategyConfig::FedAvg, &state, &updates).unwrap();
        // Client 0's delta (8, 6) has norm 10 and clips to (4, 3).
        assert_eq!(privatized.layers()[0].1.values(), &[2.0, 1.5]);
        assert_eq!(record.sigma, 0.0);
    }

    #[test]
    fn rerunning_one_round_reproduces_its_noise() {
        let mut rng = crate::seeds::derive_rng(71, "test", &[7]);
        let config = dp_config(PrivacyMode::GlobalDp);
        let strategy = StrategyConfig::FedAvg;
        let mut state = ServerState::new(random_set(&mut rng, 1.0));
        let rounds: Vec<Vec<ClientUpdate>> = (0..3)
            .map(|_| (0..3).map(|i| update(i, random_set(&mut rng, 1.0))).collect())
            .collect();
        let mut outputs = Vec::new();
        let mut third_round_input = None;
        for (k, updates) in rounds.iter().enumerate() {
            if k == 2 {
                third_round_input = Some(state.clone());
            }
            let (global, next, _) = privatize_round(&config, &strategy, &state, updates).unwrap();
            outputs.push(global);
            state = next;
        }
        let (replayed, _, _) =
            privatize_round(&config, &strategy, &third_round_input.unwrap(), &rounds[2]).unwrap();
        assert_eq!(replayed, outputs[2]);
    }

    #[test]
    fn config_validation() {
        assert!(PrivacyConfig::none().validate().is_ok());
        let bad_norm = PrivacyConfig { clipping_norm: 0.0, ..dp_config(PrivacyMode::GlobalDp) };
        assert!(bad_norm.validate().is_err());
        let bad_mult =
            PrivacyConfig { noise_multiplier: -0.1, ..dp_config(PrivacyMode::GlobalDp) };
        assert!(bad_mult.validate().is_err());
        let bad_clients = PrivacyConfig { sampled_clients: 0, ..dp_config(PrivacyMode::Metric) };
        assert!(bad_clients.validate().is_err());
        assert!(clip_update(&set(&[0.0]), &set(&[1.0]), 0.0).is_err());
    }
}
