//! Deterministic federated learning simulation engine.
//!
//! The crate simulates server-orchestrated federated training of a small
//! multilayer perceptron: the server broadcasts global parameters, clients
//! train locally on private partitions, and the server folds the returned
//! models back together with one of six aggregation strategies. On top of the
//! plain loop it implements server-side differential privacy through
//! fixed-norm clipping plus Gaussian noise, and a metric-privacy variant that
//! rescales the noise each round by the measured distance between client
//! models. A client inference attack harness quantifies how much an attacking
//! client can learn about another client's data from the aggregated model.
//!
//! Everything is deterministic: given the same experiment seed, every run
//! reproduces bit-identical parameters, metrics, and noise regardless of the
//! number of worker threads.
//!
//! Module map:
//!
//! * [`params`]: dense tensors, named parameter sets, the arithmetic kernels
//!   every other module builds on, and the on-disk binary format.
//! * [`model`]: the MLP, local training, and evaluation metrics.
//! * [`data`]: labeled datasets, client partitioners, stratified splits, the
//!   synthetic blob generator, and CSV ingestion.
//! * [`strategies`]: the six server aggregation rules and server state.
//! * [`privacy`]: update clipping, inter-client distances, noise calibration,
//!   and the per-round privatization pipeline.
//! * [`orchestrator`]: the round loop, repeated runs, and the client
//!   inference attack.

pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod privacy;
pub mod seeds;
pub mod strategies;

pub use error::{Error, Result};
