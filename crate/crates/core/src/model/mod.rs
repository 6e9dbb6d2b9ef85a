//! Volatility regressor, its posterior and the ensemble built from posterior samples.
//!
//! The network encodes the pooled sentiment vector and the pooled embedding with
//! separate residual dense stacks, concatenates both codes and maps them through a
//! residual fusion stack to a scalar: the predicted mean of `ln(v + floor)`. The
//! likelihood is Gaussian on that log scale with a learned noise level, so each
//! posterior sample predicts `E[v] = exp(yhat + sigma^2 / 2)`.

mod ensemble;
mod network;
mod posterior;
mod sampler;

use serde::{Deserialize, Serialize};

pub use ensemble::{
    load_ensemble, predict_ensemble, predict_rows, read_ensemble, sample_means, write_ensemble, EnsembleManifest,
    Prediction, ENSEMBLE_MAGIC, ENSEMBLE_VERSION,
};
pub use network::{Activation, ForwardTrace, Layout, ModelConfig, Network, ParamSlice};
pub use posterior::{grad_log_posterior, init_params, log_posterior, log_prior, value_and_grad, Row};
pub use sampler::{sample_posterior, training_log_csv, LogRow, PsgldState, SamplerConfig, STEP_DECAY_EXPONENT};

use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} dimension mismatch: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("training split is empty")]
    EmptyTrain,
    #[error("ensemble has no samples")]
    EmptyEnsemble,
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("ensemble file: {0}")]
    Format(String),
    #[error("ensemble checksum mismatch (file corrupt or truncated)")]
    Checksum,
    #[error("ensemble layout hash {found:#018x} does not match the configured model {expected:#018x}")]
    LayoutMismatch { expected: u64, found: u64 },
    #[error("unsupported ensemble version {0}")]
    Version(u32),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One realization of every network weight plus `log_noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub values: Vec<T>,
    pub layout: Layout,
}

impl<T: Real> Params<T> {
    pub fn new(values: Vec<T>, layout: Layout) -> Self {
        debug_assert_eq!(values.len(), layout.n_params());
        Self { values, layout }
    }

    pub fn slice(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: u64,
    pub dataset_hash: String,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble<T> {
    pub config: ModelConfig,
    pub samples: Vec<Params<T>>,
    pub provenance: Provenance,
}

impl<T: Real> PosteriorEnsemble<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ensemble holding the samples of both inputs (same configuration assumed).
    pub fn union(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.samples.extend(other.samples.iter().cloned());
        out
    }
}
