//! Preconditioned stochastic gradient Langevin dynamics with an RMSprop-style
//! diagonal preconditioner, and the training loop that collects an ensemble.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, Network};
use super::posterior::{init_params, value_and_grad, Row};
use super::{ModelError, Params, PosteriorEnsemble, Provenance};
use crate::scalar::Real;

/// Exponent of the polynomial step-size decay.
pub const STEP_DECAY_EXPONENT: f64 = 0.55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Initial step size.
    pub step_size: f64,
    /// Steps over which the step size falls by `2^-0.55`.
    pub step_decay: f64,
    /// Preconditioner moving-average decay.
    pub precond_decay: f64,
    /// Preconditioner damping.
    pub damping: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub ensemble_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of training rows the likelihood represents; defaults to the train split size.
    pub dataset_size: Option<usize>,
    /// Start the head bias at the mean training target instead of zero.
    pub warm_start_bias: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-6,
            step_decay: 5000.0,
            precond_decay: 0.99,
            damping: 1e-5,
            burn_in: 3000,
            thinning: 100,
            ensemble_size: 20,
            batch_size: 64,
            seed: 0,
            dataset_size: None,
            warm_start_bias: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.thinning == 0 || self.ensemble_size == 0 || self.batch_size == 0 {
            return bad("thinning, ensemble_size and batch_size must be >= 1");
        }
        if !(self.precond_decay > 0.0 && self.precond_decay < 1.0) {
            return bad("precond_decay must lie in (0, 1)");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.step_decay > 0.0) || !(self.damping > 0.0) {
            return bad("step_decay and damping must be positive");
        }
        Ok(())
    }

    /// `step_size * (1 + t / step_decay)^-0.55`.
    pub fn step_size_at(&self, t: u64) -> f64 {
        self.step_size * (1.0 + t as f64 / self.step_decay).powf(-STEP_DECAY_EXPONENT)
    }

    pub fn total_steps(&self) -> usize {
        self.burn_in + self.thinning * self.ensemble_size
    }
}

/// Chain state: position, preconditioner accumulator and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PsgldState<T> {
    pub theta: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> PsgldState<T> {
    pub fn new(theta: Vec<T>) -> Self {
        let v = vec![T::zero(); theta.len()];
        Self { theta, v, step: 0 }
    }

    /// One update with explicit standard-normal draws `xi`.
    ///
    /// `grad` is the minibatch estimate of the full log-posterior gradient and `n` the
    /// dataset size, so `grad / n` is the per-datum scale fed to the preconditioner.
    pub fn step_with_noise(&mut self, grad: &[T], n: f64, cfg: &SamplerConfig, xi: &[T]) -> Result<(), ModelError> {
        if grad.len() != self.theta.len() || xi.len() != self.theta.len() {
            return Err(ModelError::Dimension { what: "gradient", expected: self.theta.len(), found: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite {
                step: self.step,
                detail: format!("gradient[{i}] = {}", grad[i]),
            });
        }
        let eps = T::of(cfg.step_size_at(self.step));
        let alpha = T::of(cfg.precond_decay);
        let lambda = T::of(cfg.damping);
        let inv_n = T::of(1.0 / n);
        let half = T::of(0.5);
        for i in 0..self.theta.len() {
            let gbar = grad[i] * inv_n;
            self.v[i] = alpha * self.v[i] + (T::one() - alpha) * gbar * gbar;
            let precond = T::one() / (self.v[i].sqrt() + lambda);
            self.theta[i] += half * eps * precond * grad[i] + (eps * precond).sqrt() * xi[i];
        }
        self.step += 1;
        Ok(())
    }

    pub fn step<R: Rng + ?Sized>(&mut self, grad: &[T], n: f64, cfg: &SamplerConfig, rng: &mut R) -> Result<(), ModelError> {
        let xi: Vec<T> = (0..self.theta.len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        self.step_with_noise(grad, n, cfg, &xi)
    }
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean minibatch log posterior over the epoch.
    pub train_logpost: f64,
    pub val_rmse: Option<f64>,
}

pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,epoch,train_logpost,val_rmse\n");
    for r in rows {
        let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.train_logpost, val));
    }
    out
}

fn rmse_on_vol<T: Real>(net: &Network, theta: &[T], rows: &[Row<T>], floor: f64) -> f64 {
    let sigma2 = (theta[net.log_noise_index()] + theta[net.log_noise_index()]).exp();
    let half = T::of(0.5);
    let se: f64 = rows
        .iter()
        .map(|r| {
            let pred = (net.forward(theta, &r.s, &r.e) + half * sigma2).exp().to_f64_lossy();
            let truth = r.y.to_f64_lossy().exp() - floor;
            (pred - truth).powi(2)
        })
        .sum();
    (se / rows.len() as f64).sqrt()
}

/// Run the chain: `burn_in` steps, then keep every `thinning`-th state until
/// `ensemble_size` samples are collected. Minibatches come from a seeded shuffle per epoch.
pub fn sample_posterior<T: Real>(
    train: &[Row<T>],
    validation: &[Row<T>],
    mcfg: &ModelConfig,
    scfg: &SamplerConfig,
) -> Result<(PosteriorEnsemble<T>, Vec<LogRow>), ModelError> {
    scfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrain);
    }
    let net = Network::new(mcfg)?;
    for r in train.iter().chain(validation) {
        net.check_dims(&r.s, &r.e)?;
    }
    let n = scfg.dataset_size.unwrap_or(train.len()) as f64;
    let mut init = init_params::<T>(&net, scfg.seed);
    if scfg.warm_start_bias {
        let mean_y = train.iter().map(|r| r.y).sum::<T>() / T::of_usize(train.len());
        init.values[net.head_bias_index()] = mean_y;
    }
    let mut state = PsgldState::new(init.values);
    let mut noise_rng = ChaCha20Rng::seed_from_u64(scfg.seed);
    noise_rng.set_stream(1);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(scfg.seed);
    shuffle_rng.set_stream(2);

    let total = scfg.total_steps() as u64;
    let batch_size = scfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut samples = Vec::with_capacity(scfg.ensemble_size);
    let mut log = Vec::new();
    let mut epoch = 0usize;
    while state.step < total {
        order.shuffle(&mut shuffle_rng);
        let mut lp_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            if state.step >= total {
                break;
            }
            let batch: Vec<&Row<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let (lp, grad) = value_and_grad(&net, &state.theta, &batch, n, mcfg.prior_sigma)?;
            if !lp.is_finite() {
                return Err(ModelError::NonFinite { step: state.step, detail: format!("log posterior = {lp}") });
            }
            state.step(&grad, n, scfg, &mut noise_rng)?;
            lp_sum += lp.to_f64_lossy();
            batches += 1;
            let s = state.step as usize;
            if s > scfg.burn_in && (s - scfg.burn_in) % scfg.thinning == 0 {
                samples.push(Params::new(state.theta.clone(), net.layout().clone()));
            }
        }
        let val_rmse = (!validation.is_empty()).then(|| rmse_on_vol(&net, &state.theta, validation, mcfg.target_floor));
        log.push(LogRow { step: state.step, epoch, train_logpost: lp_sum / batches.max(1) as f64, val_rmse });
        epoch += 1;
    }
    let ensemble = PosteriorEnsemble {
        config: mcfg.clone(),
        samples,
        provenance: Provenance { seed: scfg.seed, steps: state.step, dataset_hash: String::new(), sampler: scfg.clone() },
    };
    Ok((ensemble, log))
}
