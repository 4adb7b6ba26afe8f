//! Discrete state-space models, Euler–Maruyama stepping and synthetic truth.
//!
//! A model advances the state by
//! `x_{n+1} = x_n + f(x_n) dt + s * w_n` with `s = sigma` ([`NoiseScaling::PerStep`])
//! or `s = sigma * sqrt(dt)` ([`NoiseScaling::SqrtDt`]), and observes
//! `y = g(x) + R * v`. Noise scales are per-dimension (diagonal covariance).

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::derive_seed;

/// Deterministic drift `f: R^d -> R^d`.
pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }
}

pub type DriftFn = Arc<dyn Drift>;

/// Deterministic observation operator `g: R^d -> R^m` with derivatives.
pub trait Observation: Send + Sync {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Row-major `m x d` Jacobian.
    fn jacobian_into(&self, x: &[f64], out: &mut [f64]);

    /// Adds `sum_j weights[j] * Hess(g_j)(x)` to the row-major `d x d` matrix `out`.
    /// Linear operators have nothing to add.
    fn add_curvature(&self, _x: &[f64], _weights: &[f64], _out: &mut [f64]) {}

    /// True when `g` is affine, so its Jacobian does not depend on `x`.
    fn is_linear(&self) -> bool {
        false
    }

    /// A state whose image under `g` is `y`, when one is defined.
    fn pullback(&self, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim()];
        self.eval_into(x, &mut out);
        out
    }
}

pub type ObsFn = Arc<dyn Observation>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    PerStep,
    #[default]
    SqrtDt,
}

impl NoiseScaling {
    pub fn factor(self, dt: f64) -> f64 {
        match self {
            NoiseScaling::PerStep => 1.0,
            NoiseScaling::SqrtDt => dt.sqrt(),
        }
    }
}

impl std::str::FromStr for NoiseScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(NoiseScaling::PerStep),
            "sqrt_dt" => Ok(NoiseScaling::SqrtDt),
            other => Err(Error::InvalidConfig(format!("unknown noise scaling `{other}`"))),
        }
    }
}

/// Effective per-step transition standard deviation.
pub fn effective_scale(sigma: &[f64], dt: f64, scaling: NoiseScaling) -> Vec<f64> {
    let k = scaling.factor(dt);
    sigma.iter().map(|s| s * k).collect()
}

/// `-alpha (x^3 - x)`, the force of the potential `alpha/4 (x^4 - 2x^2)`.
pub fn drift_doublewell(x: f64, alpha: f64) -> f64 {
    -alpha * (x * x * x - x)
}

pub fn drift_lorenz63(x: &[f64], a1: f64, a2: f64, a3: f64) -> Result<[f64; 3]> {
    check_dim(3, x.len())?;
    let (u, v, w) = (x[0], x[1], x[2]);
    Ok([a1 * (v - u), a2 * u - v - u * w, u * v - a3 * w])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub alpha: f64,
}

impl Drift for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = drift_doublewell(x[0], self.alpha);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63 {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for Lorenz63 {
    fn default() -> Self {
        Self { a1: 10.0, a2: 28.0, a3: 8.0 / 3.0 }
    }
}

impl Drift for Lorenz63 {
    fn dim(&self) -> usize {
        3
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.a1 * (x[1] - x[0]);
        out[1] = self.a2 * x[0] - x[1] - x[0] * x[2];
        out[2] = x[0] * x[1] - self.a3 * x[2];
    }
}

/// `f(x) = A x` with a row-major `d x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDrift {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearDrift {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        check_dim(dim * dim, matrix.len())?;
        Ok(Self { dim, matrix })
    }

    pub fn scalar(a: f64) -> Self {
        Self { dim: 1, matrix: vec![a] }
    }
}

impl Drift for LinearDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.dim..(i + 1) * self.dim];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// Drift backed by a closure.
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Drift for FnDrift<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity {
    pub dim: usize,
}

impl Observation for Identity {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn jacobian_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = 1.0;
        }
    }

    fn pullback(&self, y: &[f64]) -> Option<Vec<f64>> {
        Some(y.to_vec())
    }
}

/// `g(x) = H x` with a row-major `m x d` matrix. Has no pullback.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl LinearObservation {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, matrix.len())?;
        Ok(Self { rows, cols, matrix })
    }
}

impl Observation for LinearObservation {
    fn state_dim(&self) -> usize {
        self.cols
    }

    fn obs_dim(&self) -> usize {
        self.rows
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn jacobian_into(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.matrix);
    }
}

#[derive(Clone)]
pub struct StateSpaceModel {
    drift: DriftFn,
    observation: ObsFn,
    diffusion_scale: Vec<f64>,
    obs_noise_scale: Vec<f64>,
    dt: f64,
    noise_scaling: NoiseScaling,
    transition_scale: Vec<f64>,
}

impl std::fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("state_dim", &self.state_dim())
            .field("obs_dim", &self.obs_dim())
            .field("diffusion_scale", &self.diffusion_scale)
            .field("obs_noise_scale", &self.obs_noise_scale)
            .field("dt", &self.dt)
            .field("noise_scaling", &self.noise_scaling)
            .finish()
    }
}

impl StateSpaceModel {
    /// Diffusion scales may be zero (deterministic dynamics); observation
    /// scales must be strictly positive.
    pub fn new(
        drift: DriftFn,
        observation: ObsFn,
        diffusion_scale: Vec<f64>,
        obs_noise_scale: Vec<f64>,
        dt: f64,
        noise_scaling: NoiseScaling,
    ) -> Result<Self> {
        let d = drift.dim();
        let m = observation.obs_dim();
        if d == 0 || m == 0 {
            return Err(Error::InvalidConfig("state and observation dimensions must be positive".into()));
        }
        check_dim(d, observation.state_dim())?;
        check_dim(d, diffusion_scale.len())?;
        check_dim(m, obs_noise_scale.len())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if diffusion_scale.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("diffusion scales must be nonnegative".into()));
        }
        if obs_noise_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("observation noise scales must be positive".into()));
        }
        let transition_scale = effective_scale(&diffusion_scale, dt, noise_scaling);
        Ok(Self { drift, observation, diffusion_scale, obs_noise_scale, dt, noise_scaling, transition_scale })
    }

    /// Scalar double-well model with identity observation.
    pub fn double_well(alpha: f64, sigma: f64, r: f64, dt: f64, scaling: NoiseScaling) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        Self::new(
            Arc::new(DoubleWell { alpha }),
            Arc::new(Identity { dim: 1 }),
            vec![sigma],
            vec![r],
            dt,
            scaling,
        )
    }

    /// Lorenz 63 with full-state identity observation and isotropic noise.
    pub fn lorenz63(params: Lorenz63, sigma: f64, r: f64, dt: f64, scaling: NoiseScaling) -> Result<Self> {
        Self::new(
            Arc::new(params),
            Arc::new(Identity { dim: 3 }),
            vec![sigma; 3],
            vec![r; 3],
            dt,
            scaling,
        )
    }

    /// Scalar linear-Gaussian model `x' = a x + sigma w`, `y = x + r v`
    /// (unit time step, per-step noise).
    pub fn linear_gaussian(a: f64, sigma: f64, r: f64) -> Result<Self> {
        Self::new(
            Arc::new(LinearDrift::scalar(a - 1.0)),
            Arc::new(Identity { dim: 1 }),
            vec![sigma],
            vec![r],
            1.0,
            NoiseScaling::PerStep,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.obs_dim()
    }

    pub fn drift(&self) -> &DriftFn {
        &self.drift
    }

    pub fn observation(&self) -> &ObsFn {
        &self.observation
    }

    pub fn diffusion_scale(&self) -> &[f64] {
        &self.diffusion_scale
    }

    pub fn obs_noise_scale(&self) -> &[f64] {
        &self.obs_noise_scale
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_scaling(&self) -> NoiseScaling {
        self.noise_scaling
    }

    /// Per-dimension standard deviation of one transition.
    pub fn transition_scale(&self) -> &[f64] {
        &self.transition_scale
    }

    /// Same model with a different drift (used for homotopy levels).
    pub fn with_drift(&self, drift: DriftFn) -> Result<Self> {
        check_dim(self.state_dim(), drift.dim())?;
        Ok(Self { drift, ..self.clone() })
    }

    /// Writes `x + f(x) dt` into `out`.
    pub fn predict_mean_into(&self, drift: &dyn Drift, x: &[f64], out: &mut [f64]) {
        predict_mean_into(drift, self.dt, x, out)
    }

    pub fn predict_mean(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        predict_mean_into(self.drift.as_ref(), self.dt, x, &mut out);
        out
    }

    /// Draws one stochastic transition from `x`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        predict_mean_into(self.drift.as_ref(), self.dt, x, &mut out);
        for (o, s) in out.iter_mut().zip(&self.transition_scale) {
            let z: f64 = rng.sample(StandardNormal);
            *o += s * z;
        }
        out
    }

    /// Draws a noisy observation of `x`.
    pub fn sample_observation<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut y = self.observation.eval(x);
        for (o, r) in y.iter_mut().zip(&self.obs_noise_scale) {
            let z: f64 = rng.sample(StandardNormal);
            *o += r * z;
        }
        y
    }
}

pub(crate) fn predict_mean_into(drift: &dyn Drift, dt: f64, x: &[f64], out: &mut [f64]) {
    drift.eval_into(x, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi + *o * dt;
    }
}

/// One Euler–Maruyama step with an externally supplied standard-normal draw.
pub fn step_state(model: &StateSpaceModel, x: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.state_dim(), noise.len())?;
    let mut out = vec![0.0; x.len()];
    model.predict_mean_into(model.drift.as_ref(), x, &mut out);
    for ((o, s), z) in out.iter_mut().zip(model.transition_scale()).zip(noise) {
        *o += s * z;
    }
    Ok(out)
}

/// `g(x) + R * noise`.
pub fn observe(model: &StateSpaceModel, x: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.state_dim(), x.len())?;
    check_dim(model.obs_dim(), noise.len())?;
    let mut y = model.observation.eval(x);
    for ((o, r), z) in y.iter_mut().zip(model.obs_noise_scale()).zip(noise) {
        *o += r * z;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>) -> Self {
        Self { states }
    }

    pub fn step_count(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Columns `step, x_0..x_{d-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.dim()).map(|k| format!("x_{k}")));
        w.write_record(&header)?;
        for (n, state) in self.states.iter().enumerate() {
            let mut row = vec![n.to_string()];
            row.extend(state.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Observations arriving every `gap` steps, starting at step `gap`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub gap: usize,
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Observation taken at `step`, if any.
    pub fn at(&self, step: usize) -> Option<&[f64]> {
        if step == 0 || self.gap == 0 || !step.is_multiple_of(self.gap) {
            return None;
        }
        self.entries
            .get(step / self.gap - 1)
            .filter(|(s, _)| *s == step)
            .map(|(_, y)| y.as_slice())
    }

    /// Columns `step, y_0..y_{m-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.entries.first().map_or(0, |(_, y)| y.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..m).map(|k| format!("y_{k}")));
        w.write_record(&header)?;
        for (step, y) in &self.entries {
            let mut row = vec![step.to_string()];
            row.extend(y.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates the truth and its observations.
///
/// State noise and observation noise come from separate streams, so the
/// truth for a given seed does not depend on `gap`. With `switch_at = Some(k)`
/// the state computed for step `k` is negated before it is observed.
pub fn simulate_truth(
    model: &StateSpaceModel,
    x0: &[f64],
    n_steps: usize,
    gap: usize,
    seed: u64,
    switch_at: Option<usize>,
) -> Result<(Trajectory, ObservationSeries)> {
    check_dim(model.state_dim(), x0.len())?;
    if n_steps == 0 || gap == 0 {
        return Err(Error::InvalidConfig("n_steps and gap must be at least 1".into()));
    }
    let mut state_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut entries = Vec::with_capacity(n_steps / gap);
    states.push(x0.to_vec());
    for n in 1..=n_steps {
        let mut x = model.sample_transition(&states[n - 1], &mut state_rng);
        if switch_at == Some(n) {
            x.iter_mut().for_each(|v| *v = -*v);
        }
        // observation noise is drawn every step to keep the stream aligned across gaps
        let y = model.sample_observation(&x, &mut obs_rng);
        if n % gap == 0 {
            entries.push((n, y));
        }
        states.push(x);
    }
    Ok((Trajectory::new(states), ObservationSeries { gap, entries }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dw(alpha: f64, sigma: f64) -> StateSpaceModel {
        StateSpaceModel::double_well(alpha, sigma, 1.5, 0.01, NoiseScaling::SqrtDt).unwrap()
    }

    #[test]
    fn doublewell_drift_values() {
        assert_eq!(drift_doublewell(1.0, 1.0), 0.0);
        assert_eq!(drift_doublewell(0.0, 1.0), 0.0);
        assert!((drift_doublewell(0.5, 1.0) - 0.375).abs() < 1e-15);
        assert_eq!(drift_doublewell(-1.0, 7.0), 0.0);
    }

    #[test]
    fn lorenz_drift_values() {
        assert_eq!(drift_lorenz63(&[0.0; 3], 10.0, 28.0, 8.0 / 3.0).unwrap(), [0.0; 3]);
        let v = drift_lorenz63(&[1.0, 1.0, 1.0], 10.0, 28.0, 8.0 / 3.0).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 26.0);
        assert!((v[2] + 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            drift_lorenz63(&[1.0, 2.0], 10.0, 28.0, 8.0 / 3.0),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn lorenz_fixed_points_vanish() {
        // Fixed points solved by hand: x = y, z = a2 - 1, x^2 = a3 (a2 - 1).
        let (a1, a2, a3): (f64, f64, f64) = (10.0, 28.0, 8.0 / 3.0);
        let c: f64 = (a3 * (a2 - 1.0)).sqrt();
        for p in [[0.0, 0.0, 0.0], [c, c, a2 - 1.0], [-c, -c, a2 - 1.0]] {
            let v = drift_lorenz63(&p, a1, a2, a3).unwrap();
            for comp in v {
                assert!(comp.abs() < 1e-12, "{p:?} -> {v:?}");
            }
        }
    }

    #[test]
    fn step_state_zero_noise_is_euler_step() {
        let m = dw(1.0, 1.5);
        let x = step_state(&m, &[0.6], &[0.0]).unwrap();
        assert!((x[0] - 0.60384).abs() < 1e-15);
    }

    #[test]
    fn step_state_pure_diffusion() {
        let m = StateSpaceModel::new(
            Arc::new(LinearDrift::scalar(0.0)),
            Arc::new(Identity { dim: 1 }),
            vec![1.0],
            vec![1.0],
            0.01,
            NoiseScaling::SqrtDt,
        )
        .unwrap();
        let x = step_state(&m, &[0.0], &[1.0]).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15);
        let per_step = StateSpaceModel::new(
            Arc::new(LinearDrift::scalar(0.0)),
            Arc::new(Identity { dim: 1 }),
            vec![1.0],
            vec![1.0],
            0.01,
            NoiseScaling::PerStep,
        )
        .unwrap();
        assert_eq!(step_state(&per_step, &[0.0], &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn step_state_lorenz_matches_reference_euler() {
        let m = StateSpaceModel::lorenz63(Lorenz63::default(), 1.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let x = step_state(&m, &[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        // independent reference: x + dt * (a1(y-x), a2 x - y - x z, x y - a3 z)
        let expected = [1.0, 1.0 + 0.01 * 26.0, 1.0 - 0.01 * 5.0 / 3.0];
        for (a, b) in x.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(step_state(&m, &[1.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn observe_identity() {
        let m = StateSpaceModel::double_well(1.0, 1.5, 1.5, 0.01, NoiseScaling::SqrtDt).unwrap();
        assert_eq!(observe(&m, &[0.6], &[0.0]).unwrap(), vec![0.6]);
        let m2 = StateSpaceModel::double_well(1.0, 1.5, 2.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        assert_eq!(observe(&m2, &[1.0], &[0.5]).unwrap(), vec![2.0]);
        let l = StateSpaceModel::lorenz63(Lorenz63::default(), 1.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        assert_eq!(observe(&l, &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(observe(&l, &[1.0, 2.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn simulate_counts_and_gaps() {
        let m = dw(1.0, 1.5);
        let (traj, obs) = simulate_truth(&m, &[0.6], 300, 1, 3, None).unwrap();
        assert_eq!(traj.states.len(), 301);
        assert_eq!(traj.step_count(), 300);
        assert_eq!(obs.len(), 300);

        let (_, obs) = simulate_truth(&m, &[0.6], 1000, 5, 3, None).unwrap();
        assert_eq!(obs.len(), 200);
        let steps: Vec<usize> = obs.entries.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, (1..=200).map(|k| 5 * k).collect::<Vec<_>>());
        assert!(obs.at(10).is_some());
        assert!(obs.at(11).is_none());
        assert!(obs.at(0).is_none());
    }

    #[test]
    fn simulate_truth_independent_of_gap() {
        let m = dw(1.0, 1.5);
        let (a, _) = simulate_truth(&m, &[0.6], 100, 1, 9, None).unwrap();
        let (b, _) = simulate_truth(&m, &[0.6], 100, 10, 9, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_is_seed_deterministic() {
        let m = dw(1.0, 1.5);
        let a = simulate_truth(&m, &[0.6], 200, 2, 11, Some(50)).unwrap();
        let b = simulate_truth(&m, &[0.6], 200, 2, 11, Some(50)).unwrap();
        assert_eq!(a, b);
        let c = simulate_truth(&m, &[0.6], 200, 2, 12, Some(50)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn forced_switch_negates_state() {
        // zero diffusion keeps the pre-switch state deterministic
        let m = StateSpaceModel::double_well(1.0, 0.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let (traj, obs) = simulate_truth(&m, &[0.97], 150, 1, 0, Some(150)).unwrap();
        let pre = step_state(&m, &traj.states[149], &[0.0]).unwrap()[0];
        assert_eq!(traj.states[150][0], -pre);
        assert!(pre > 0.97);
        assert_eq!(obs.entries.len(), 150);
    }

    #[test]
    fn zero_diffusion_is_deterministic_euler() {
        let m = StateSpaceModel::double_well(1.0, 0.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let (traj, _) = simulate_truth(&m, &[0.3], 50, 1, 5, None).unwrap();
        let mut x = 0.3;
        for n in 1..=50 {
            x += drift_doublewell(x, 1.0) * 0.01;
            assert_eq!(traj.states[n][0], x);
        }
    }

    #[test]
    fn model_validation() {
        assert!(StateSpaceModel::double_well(1.0, 1.0, 0.0, 0.01, NoiseScaling::SqrtDt).is_err());
        assert!(StateSpaceModel::double_well(1.0, 1.0, 1.0, 0.0, NoiseScaling::SqrtDt).is_err());
        assert!(StateSpaceModel::double_well(0.0, 1.0, 1.0, 0.01, NoiseScaling::SqrtDt).is_err());
        assert!(StateSpaceModel::double_well(1.0, -1.0, 1.0, 0.01, NoiseScaling::SqrtDt).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = StateSpaceModel::lorenz63(Lorenz63::default(), 1.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let (traj, obs) = simulate_truth(&m, &[1.0, 1.0, 1.0], 4, 2, 0, None).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,x_0,x_1,x_2");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0,1,1,1"));
        let mut buf = Vec::new();
        obs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,y_0,y_1,y_2");
        assert!(lines[1].starts_with("2,"));
        assert!(lines[2].starts_with("4,"));
    }
}
