//! Quantile reward models on frozen feature vectors.
//!
//! The pipeline has two fitted stages. Per-attribute linear quantile layers
//! turn a response's features into a reward distribution for each attribute,
//! and a prompt-conditioned gating MLP mixes those distributions into a single
//! reward distribution. The mixture can be reduced to its expectation or to a
//! risk-averse exponential utility, which the [`rlhf`] module uses to train a
//! toy policy.

pub mod distribution;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod io;
pub mod optim;
pub mod quantile_regression;
pub mod rlhf;
pub mod synthetic;

pub use distribution::{MixtureWeights, QuantileDistribution, QuantileLevels, UtilityConfig};
pub use error::{QrmError, Result};

pub use gating::{GatingParams, GatingTrainConfig, PreferencePair, QuantileRewardModel};
pub use quantile_regression::{AttributeExample, AttributeQuantileModel, RegressionConfig};
