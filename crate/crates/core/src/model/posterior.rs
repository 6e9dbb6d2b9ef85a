//! Gaussian likelihood on log-volatility, isotropic Gaussian prior and their gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::network::{ForwardTrace, Network};
use super::{ModelError, Params};
use crate::features::PooledFeatures;
use crate::scalar::Real;

/// One supervised row in model space: `y = ln(v + floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row<T> {
    pub s: Vec<T>,
    pub e: Vec<T>,
    pub y: T,
}

impl<T: Real> Row<T> {
    pub fn new(features: &PooledFeatures, v: f64, floor: f64) -> Self {
        Self {
            s: features.s_pooled.iter().map(|&x| T::of(x)).collect(),
            e: features.e_pooled.iter().map(|&x| T::of(x)).collect(),
            y: T::of((v + floor).ln()),
        }
    }
}

/// Gaussian weights with std `1/sqrt(fan_in)`, zero biases, `log_noise = ln(noise_sigma_init)`.
pub fn init_params<T: Real>(net: &Network, seed: u64) -> Params<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = vec![T::zero(); net.n_params()];
    for (range, fan_in) in net.weight_tensors() {
        let std = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[range] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::of(z * std);
        }
    }
    values[net.log_noise_index()] = T::of(net.config().noise_sigma_init.ln());
    Params::new(values, net.layout().clone())
}

fn half_ln_2pi<T: Real>() -> T {
    T::of(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Log prior `sum_theta ln N(theta | 0, prior_sigma^2)`.
pub fn log_prior<T: Real>(theta: &[T], prior_sigma: f64) -> T {
    let var = T::of(prior_sigma * prior_sigma);
    let c = half_ln_2pi::<T>() + T::of(prior_sigma.ln());
    theta.iter().map(|&x| -c - x * x / (var + var)).sum()
}

/// `(N/|batch|) * sum_j ln N(y_j | yhat_j, sigma_n^2) + log prior`.
pub fn log_posterior<T: Real>(net: &Network, theta: &[T], batch: &[&Row<T>], n: f64, prior_sigma: f64) -> Result<T, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let log_noise = theta[net.log_noise_index()];
    let inv_var = (-(log_noise + log_noise)).exp();
    let mut ll = T::zero();
    for row in batch {
        let r = row.y - net.forward(theta, &row.s, &row.e);
        ll += -half_ln_2pi::<T>() - log_noise - T::of(0.5) * r * r * inv_var;
    }
    Ok(T::of(n / batch.len() as f64) * ll + log_prior(theta, prior_sigma))
}

/// Log posterior and its exact gradient with respect to every entry of `theta`.
pub fn value_and_grad<T: Real>(
    net: &Network,
    theta: &[T],
    batch: &[&Row<T>],
    n: f64,
    prior_sigma: f64,
) -> Result<(T, Vec<T>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let scale = T::of(n / batch.len() as f64);
    let ln_idx = net.log_noise_index();
    let log_noise = theta[ln_idx];
    let inv_var = (-(log_noise + log_noise)).exp();
    let mut grad = vec![T::zero(); theta.len()];
    let mut trace = ForwardTrace::default();
    let mut ll = T::zero();
    let mut d_log_noise = T::zero();
    for row in batch {
        net.forward_trace(theta, &row.s, &row.e, &mut trace);
        let r = row.y - trace.output;
        let z2 = r * r * inv_var;
        ll += -half_ln_2pi::<T>() - log_noise - T::of(0.5) * z2;
        d_log_noise += z2 - T::one();
        net.backward(theta, &row.s, &row.e, &trace, scale * r * inv_var, &mut grad);
    }
    grad[ln_idx] += scale * d_log_noise;
    let inv_prior = T::of(1.0 / (prior_sigma * prior_sigma));
    for (g, &x) in grad.iter_mut().zip(theta) {
        *g -= x * inv_prior;
    }
    Ok((scale * ll + log_prior(theta, prior_sigma), grad))
}

pub fn grad_log_posterior<T: Real>(
    net: &Network,
    theta: &[T],
    batch: &[&Row<T>],
    n: f64,
    prior_sigma: f64,
) -> Result<Vec<T>, ModelError> {
    value_and_grad(net, theta, batch, n, prior_sigma).map(|(_, g)| g)
}
