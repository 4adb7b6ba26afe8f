//! Diagonal Gaussian log-densities: noise laws, transitions and likelihoods.
//!
//! Everything is evaluated in log space.

use crate::error::{check_dim, Error, Result};
use crate::model::{effective_scale, predict_mean_into, Drift, NoiseScaling, StateSpaceModel};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), scale.len())?;
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("Gaussian scales must be positive".into()));
        }
        Ok(Self { mean, scale })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Unchecked kernel: callers guarantee equal lengths.
#[inline]
pub(crate) fn diag_logpdf(x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut log_norm = 0.0;
    for ((xi, mi), si) in x.iter().zip(mean).zip(scale) {
        let z = (xi - mi) / si;
        quad += z * z;
        log_norm += si.ln();
    }
    -0.5 * quad - log_norm - 0.5 * x.len() as f64 * LN_2PI
}

pub fn gaussian_logpdf(x: &[f64], dist: &DiagonalGaussian) -> Result<f64> {
    check_dim(dist.dim(), x.len())?;
    Ok(diag_logpdf(x, &dist.mean, &dist.scale))
}

/// Log-density of `x_next` given `x_prev` under `x_prev + drift(x_prev) dt + s w`.
pub fn transition_logpdf(
    drift: &dyn Drift,
    sigma: &[f64],
    dt: f64,
    x_prev: &[f64],
    x_next: &[f64],
    noise_scaling: NoiseScaling,
) -> Result<f64> {
    let d = drift.dim();
    check_dim(d, x_prev.len())?;
    check_dim(d, x_next.len())?;
    check_dim(d, sigma.len())?;
    let mut mean = vec![0.0; d];
    predict_mean_into(drift, dt, x_prev, &mut mean);
    let scale = effective_scale(sigma, dt, noise_scaling);
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConfig("transition density needs positive diffusion".into()));
    }
    Ok(diag_logpdf(x_next, &mean, &scale))
}

/// `log p(y | x)` with mean `g(x)` and scale `R`.
pub fn likelihood_logpdf(model: &StateSpaceModel, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.obs_dim(), y.len())?;
    let gx = model.observation().eval(x);
    Ok(diag_logpdf(y, &gx, model.obs_noise_scale()))
}
