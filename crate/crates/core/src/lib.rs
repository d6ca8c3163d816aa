//! Deterministic federated learning simulator for clients whose data differs
//! across clients and drifts over time.
//!
//! Clients hold a split model: a shared representation layer that the server
//! averages, and a personalized head that never leaves the client. Each
//! client's data arrives as a sequence of stage tasks whose class mix drifts
//! over time, while the global class frequencies are long-tailed. Class
//! prototypes (mean embeddings) are kept per client and on the server and
//! refreshed by moving averages; they regularize local training and drive
//! nearest-prototype inference.
//!
//! Module map:
//! - [`datagen`]: synthetic Gaussian-mixture data, long-tail subsampling and
//!   `[N, S, M]` client/stage partitioning.
//! - [`model`]: the split network, losses, exact gradients and staged SGD.
//! - [`prototypes`]: prototype computation, moving-average stores and
//!   nearest-prototype prediction.
//! - [`federation`]: the round/stage protocol, message codec and baselines.
//! - [`metrics`]: global, local and selected-participant accuracy, forgetting.

pub mod datagen;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod rng;

pub use error::{Error, ErrorCategory, Result};
