//! Implicit sampling: minimize the per-particle objective, then map a
//! reference Gaussian draw onto the level set `F(x) - gamma = xi^T xi / 2`.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result};
use crate::model::{effective_scale, predict_mean_into, Drift, NoiseScaling, ObsFn, StateSpaceModel};
use crate::optimize::{cholesky, minimize, solve_random_map_shifted, with_scratch, CholeskyFactor, Objective, Point};

type Buf = SmallVec<[f64; 4]>;

/// `F(x) = |x - pred_mean|^2_trans / 2 + |g(x) - y|^2_obs / 2`, normalization dropped.
#[derive(Clone)]
pub struct ImplicitObjective {
    pred_mean: Buf,
    inv_trans_var: Buf,
    obs_value: Buf,
    inv_obs_var: Buf,
    obs_fn: ObsFn,
}

impl std::fmt::Debug for ImplicitObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImplicitObjective")
            .field("pred_mean", &self.pred_mean)
            .field("inv_trans_var", &self.inv_trans_var)
            .field("obs_value", &self.obs_value)
            .field("inv_obs_var", &self.inv_obs_var)
            .finish()
    }
}

fn inverse_variance(scale: &[f64]) -> Result<Buf> {
    if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("implicit sampling needs positive noise scales".into()));
    }
    Ok(scale.iter().map(|s| 1.0 / (s * s)).collect())
}

impl ImplicitObjective {
    pub fn new(pred_mean: &[f64], trans_scale: &[f64], obs_value: &[f64], obs_fn: ObsFn, obs_scale: &[f64]) -> Result<Self> {
        let d = obs_fn.state_dim();
        let m = obs_fn.obs_dim();
        check_dim(d, pred_mean.len())?;
        check_dim(d, trans_scale.len())?;
        check_dim(m, obs_value.len())?;
        check_dim(m, obs_scale.len())?;
        Ok(Self {
            pred_mean: SmallVec::from_slice(pred_mean),
            inv_trans_var: inverse_variance(trans_scale)?,
            obs_value: SmallVec::from_slice(obs_value),
            inv_obs_var: inverse_variance(obs_scale)?,
            obs_fn,
        })
    }

    /// Deterministic prediction the transition term is centred on.
    pub fn pred_mean(&self) -> &[f64] {
        &self.pred_mean
    }

    /// Re-centres the transition term on the prediction of `x_prev` under
    /// `drift`, keeping the noise scales and the observation.
    pub fn repredict(&mut self, model: &StateSpaceModel, drift: &dyn Drift, x_prev: &[f64]) -> Result<()> {
        check_dim(self.pred_mean.len(), drift.dim())?;
        check_dim(self.pred_mean.len(), x_prev.len())?;
        model.predict_mean_into(drift, x_prev, &mut self.pred_mean);
        Ok(())
    }

    /// Scaled observation residuals `(g(x) - y) / R^2`, written into `out`.
    fn scaled_residuals(&self, x: &[f64], out: &mut [f64]) {
        self.obs_fn.eval_into(x, out);
        for ((g, y), w) in out.iter_mut().zip(&self.obs_value).zip(&self.inv_obs_var) {
            *g = (*g - y) * w;
        }
    }
}

impl Objective for ImplicitObjective {
    fn dim(&self) -> usize {
        self.pred_mean.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        with_scratch(self.obs_value.len(), |gx| {
            self.obs_fn.eval_into(x, gx);
            let mut f = 0.0;
            for ((xi, m), w) in x.iter().zip(&self.pred_mean).zip(&self.inv_trans_var) {
                f += (xi - m) * (xi - m) * w;
            }
            for ((g, y), w) in gx.iter().zip(&self.obs_value).zip(&self.inv_obs_var) {
                f += (g - y) * (g - y) * w;
            }
            0.5 * f
        })
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let d = self.dim();
        let m = self.obs_value.len();
        for ((g, (xi, mu)), w) in grad.iter_mut().zip(x.iter().zip(&self.pred_mean)).zip(&self.inv_trans_var) {
            *g = (xi - mu) * w;
        }
        with_scratch(m + m * d, |buf| {
            let (w, jac) = buf.split_at_mut(m);
            self.scaled_residuals(x, w);
            self.obs_fn.jacobian_into(x, jac);
            for (row, wj) in jac.chunks_exact(d).zip(w.iter()) {
                for (g, j) in grad.iter_mut().zip(row) {
                    *g += j * wj;
                }
            }
        })
    }

    fn hessian(&self, x: &[f64], hess: &mut [f64]) {
        let d = self.dim();
        let m = self.obs_value.len();
        hess.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..d {
            hess[i * d + i] = self.inv_trans_var[i];
        }
        with_scratch(m + m * d, |buf| {
            let (w, jac) = buf.split_at_mut(m);
            self.obs_fn.jacobian_into(x, jac);
            for (row, iv) in jac.chunks_exact(d).zip(&self.inv_obs_var) {
                for (a, ra) in row.iter().enumerate() {
                    let ja = ra * iv;
                    if ja == 0.0 {
                        continue;
                    }
                    for (h, rb) in hess[a * d..(a + 1) * d].iter_mut().zip(row) {
                        *h += ja * rb;
                    }
                }
            }
            self.scaled_residuals(x, w);
            self.obs_fn.add_curvature(x, w, hess);
        })
    }

    fn constant_hessian(&self) -> bool {
        self.obs_fn.is_linear()
    }
}

/// Objective for one particle: transition from `x_prev` under `drift`, observation `y`.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    drift: &dyn Drift,
    sigma: &[f64],
    dt: f64,
    noise_scaling: NoiseScaling,
    x_prev: &[f64],
    obs_fn: ObsFn,
    obs_scale: &[f64],
    y: &[f64],
) -> Result<ImplicitObjective> {
    let d = drift.dim();
    check_dim(d, x_prev.len())?;
    check_dim(d, sigma.len())?;
    check_dim(d, obs_fn.state_dim())?;
    let mut pred: Buf = SmallVec::from_elem(0.0, d);
    predict_mean_into(drift, dt, x_prev, &mut pred);
    ImplicitObjective::new(&pred, &effective_scale(sigma, dt, noise_scaling), y, obs_fn, obs_scale)
}

/// [`build_objective`] with every parameter but the drift taken from `model`.
pub fn objective_for(model: &StateSpaceModel, drift: &dyn Drift, x_prev: &[f64], y: &[f64]) -> Result<ImplicitObjective> {
    check_dim(model.state_dim(), drift.dim())?;
    check_dim(model.state_dim(), x_prev.len())?;
    let mut pred: Buf = SmallVec::from_elem(0.0, x_prev.len());
    model.predict_mean_into(drift, x_prev, &mut pred);
    ImplicitObjective::new(&pred, model.transition_scale(), y, model.observation().clone(), model.obs_noise_scale())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `-gamma + log |det J|`: the importance ratio of target to proposal.
    #[default]
    Jacobian,
    /// `-xi^T xi / 2 - gamma`, without the Jacobian factor.
    #[serde(alias = "paper")]
    PaperLiteral,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jacobian" => Ok(Self::Jacobian),
            "paper" | "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(Error::InvalidConfig(format!("unknown weight mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub weight_mode: WeightMode,
    /// Added to `min F` to form `gamma`.
    pub gamma_offset: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 100, weight_mode: WeightMode::Jacobian, gamma_offset: 0.0 }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.gamma_offset >= 0.0 && self.gamma_offset.is_finite()) {
            return Err(Error::InvalidConfig("gamma_offset must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub x: Point,
    pub log_weight: f64,
    pub lambda: f64,
    pub optimizer_iterations: usize,
    pub gamma: f64,
    pub xi_norm_sq: f64,
    /// `|F(x) - gamma - xi^T xi / 2|`.
    pub residual: f64,
}

impl WeightedSample {
    /// Residual relative to `1 + xi^T xi`.
    pub fn residual_ratio(&self) -> f64 {
        self.residual / (1.0 + self.xi_norm_sq)
    }
}

/// One implicit sample `x = psi(xi)`, with the optimizer started at `warm_start`.
///
/// Quadratic objectives (constant Hessian) are solved in closed form: one
/// Newton step reaches the minimum and the random map is linear.
pub fn implicit_sample(
    obj: &dyn Objective,
    xi: &[f64],
    warm_start: &[f64],
    settings: &SamplerSettings,
) -> Result<WeightedSample> {
    let d = obj.dim();
    check_dim(d, xi.len())?;
    check_dim(d, warm_start.len())?;
    if warm_start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("warm start must be finite".into()));
    }
    if obj.constant_hessian() {
        let factor = constant_hessian_factor(obj)?;
        return quadratic_sample(obj, xi, warm_start, settings, &factor);
    }
    let opt = minimize(obj, warm_start, settings.grad_tol, settings.max_iter)?;
    if !opt.converged {
        return Err(Error::NotConverged { iterations: opt.iterations, grad_norm: opt.grad_norm });
    }
    let factor = with_scratch(d * d, |hess| {
        obj.hessian(&opt.x_min, hess);
        cholesky(hess, d)
    })?;
    let offset = settings.gamma_offset;
    let sol = solve_random_map_shifted(obj, &opt.x_min, opt.f_min, &factor, xi, offset)?;
    finish_sample(sol.x, sol.value, sol.lambda, sol.log_jacobian, opt.f_min, opt.iterations, xi, settings)
}

/// Cholesky factor of the Hessian of an objective whose Hessian is constant.
pub fn constant_hessian_factor(obj: &dyn Objective) -> Result<CholeskyFactor> {
    if !obj.constant_hessian() {
        return Err(Error::InvalidConfig("objective Hessian is not constant".into()));
    }
    let d = obj.dim();
    with_scratch(d + d * d, |buf| {
        let (x, h) = buf.split_at_mut(d);
        obj.hessian(x, h);
        cholesky(h, d)
    })
}

/// [`implicit_sample`] for a quadratic objective, reusing `factor` from
/// [`constant_hessian_factor`] so that samples sharing a Hessian factor it once.
pub fn implicit_sample_quadratic(
    obj: &dyn Objective,
    xi: &[f64],
    warm_start: &[f64],
    settings: &SamplerSettings,
    factor: &CholeskyFactor,
) -> Result<WeightedSample> {
    let d = obj.dim();
    check_dim(d, xi.len())?;
    check_dim(d, warm_start.len())?;
    check_dim(d, factor.dim())?;
    if !obj.constant_hessian() {
        return Err(Error::InvalidConfig("objective Hessian is not constant".into()));
    }
    if warm_start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("warm start must be finite".into()));
    }
    quadratic_sample(obj, xi, warm_start, settings, factor)
}

fn quadratic_sample(
    obj: &dyn Objective,
    xi: &[f64],
    x0: &[f64],
    settings: &SamplerSettings,
    factor: &CholeskyFactor,
) -> Result<WeightedSample> {
    let d = obj.dim();
    let x_min: Point = with_scratch(d, |g| {
        obj.gradient(x0, g);
        factor.solve_in_place(g);
        x0.iter().zip(g.iter()).map(|(x, p)| x - p).collect()
    });
    let f_min = obj.value(&x_min);
    if !f_min.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let r = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let log_det_inv = -factor.log_det_lower();
    if r == 0.0 {
        return finish_sample(x_min, f_min, 0.0, log_det_inv, f_min, 1, xi, settings);
    }
    // F(x_min + lambda u) = f_min + lambda^2 / 2 along u = L^{-T} xi / |xi|
    let lambda = (r * r + 2.0 * settings.gamma_offset.max(0.0)).sqrt();
    let mut u: Point = xi.iter().map(|v| v / r).collect();
    factor.solve_upper_in_place(&mut u);
    let x: Point = x_min.iter().zip(&u).map(|(m, ui)| m + lambda * ui).collect();
    let value = obj.value(&x);
    // dlambda/dr = r / lambda, so (d - 1) ln(lambda / r) + ln(r / lambda) collapses
    let log_jacobian = log_det_inv + (d as f64 - 2.0) * (lambda / r).ln();
    finish_sample(x, value, lambda, log_jacobian, f_min, 1, xi, settings)
}

#[allow(clippy::too_many_arguments)]
fn finish_sample(
    x: Point,
    value: f64,
    lambda: f64,
    log_jacobian: f64,
    f_min: f64,
    iterations: usize,
    xi: &[f64],
    settings: &SamplerSettings,
) -> Result<WeightedSample> {
    let gamma = f_min + settings.gamma_offset;
    let rho: f64 = xi.iter().map(|v| v * v).sum();
    let residual = (value - gamma - 0.5 * rho).abs();
    let log_weight = match settings.weight_mode {
        WeightMode::Jacobian => -gamma + log_jacobian,
        WeightMode::PaperLiteral => -0.5 * rho - gamma,
    };
    if !log_weight.is_finite() || !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(WeightedSample { x, log_weight, lambda, optimizer_iterations: iterations, gamma, xi_norm_sq: rho, residual })
}
