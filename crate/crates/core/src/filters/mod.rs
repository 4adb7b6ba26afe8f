//! One-step filter operators and the driver loop.
//!
//! Every step is a pure function of `(model, ensemble, y, streams)`; the
//! randomness for particle `i` comes from its own substream, so results do
//! not depend on whether particles are processed on one thread or many.

mod enkf;
mod homotopy;
mod implicit;
mod mcmc;
mod sir;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use enkf::enkf_step;
pub use homotopy::{
    default_intermediate_drift, homotopy_drift, DataPull, HomotopyConfig, HomotopySchedule, IntermediateDrift,
};
pub use implicit::{dhipf_step, ipf_step};
pub use mcmc::dhpf_mcmc_step;
pub use sir::{apf_step, bootstrap_step};

use crate::error::{check_dim, Error, Result};
use crate::implicit::SamplerSettings;
use crate::model::{ObservationSeries, StateSpaceModel, Trajectory};
use crate::particles::{
    effective_sample_size, gather_owned, normalize_weights, resample_indices, weighted_mean, Ensemble, ResamplingScheme,
};
use crate::rng::{RngStreams, StepStreams};

/// Below this many particles the per-particle loop stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 256;

pub(crate) fn map_particles<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if n >= PARALLEL_THRESHOLD {
        (0..n).into_par_iter().map(f).collect()
    } else {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f(i)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bootstrap,
    Apf,
    Enkf,
    Ipf,
    Dhpf,
    Dhipf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 6] = [Self::Bootstrap, Self::Apf, Self::Enkf, Self::Ipf, Self::Dhpf, Self::Dhipf];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bootstrap => "bootstrap",
            Self::Apf => "apf",
            Self::Enkf => "enkf",
            Self::Ipf => "ipf",
            Self::Dhpf => "dhpf",
            Self::Dhipf => "dhipf",
        }
    }

    pub fn uses_homotopy(self) -> bool {
        matches!(self, Self::Dhpf | Self::Dhipf)
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown filter `{s}`")))
    }
}

fn default_particles() -> usize {
    20
}

fn default_ensemble() -> usize {
    200
}

fn default_mcmc_steps() -> usize {
    50
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_ensemble")]
    pub enkf_ensemble: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homotopy: Option<HomotopyConfig>,
    #[serde(default = "default_mcmc_steps")]
    pub mcmc_steps: usize,
    /// Random-walk proposal std; the transition noise std when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc_step_size: Option<f64>,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub resampling: ResamplingScheme,
    /// Resample after the implicit-sampling weights (IPF, DHIPF).
    #[serde(default = "default_true")]
    pub final_resample: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub intermediate: IntermediateDrift,
}

impl FilterConfig {
    /// Defaults for `kind`: 20 particles, 200 EnKF members, two homotopy levels.
    pub fn new(kind: FilterKind) -> Self {
        Self {
            kind,
            n_particles: default_particles(),
            enkf_ensemble: default_ensemble(),
            homotopy: kind.uses_homotopy().then(|| HomotopyConfig::linear(2)),
            mcmc_steps: default_mcmc_steps(),
            mcmc_step_size: None,
            sampler: SamplerSettings::default(),
            resampling: ResamplingScheme::default(),
            final_resample: true,
            seed: 0,
            intermediate: IntermediateDrift::default(),
        }
    }

    pub fn with_particles(mut self, n: usize) -> Self {
        self.n_particles = n;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        if self.kind.uses_homotopy() {
            self.homotopy = Some(HomotopyConfig::linear(levels));
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Ensemble size actually used by this filter.
    pub fn ensemble_size(&self) -> usize {
        match self.kind {
            FilterKind::Enkf => self.enkf_ensemble,
            _ => self.n_particles,
        }
    }

    /// Short label, e.g. `dhipf(L=3)`.
    pub fn label(&self) -> String {
        match &self.homotopy {
            Some(h) => format!("{}(L={})", self.kind, h.levels),
            None => self.kind.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be at least 1".into()));
        }
        if self.kind == FilterKind::Enkf && self.enkf_ensemble < 2 {
            return Err(Error::InvalidConfig("enkf_ensemble must be at least 2".into()));
        }
        match (&self.homotopy, self.kind.uses_homotopy()) {
            (Some(h), true) => h.validate()?,
            (None, true) => return Err(Error::InvalidConfig(format!("{} requires a homotopy section", self.kind))),
            (Some(_), false) => {
                return Err(Error::InvalidConfig(format!("homotopy is only valid for dhpf and dhipf, not {}", self.kind)))
            }
            (None, false) => {}
        }
        if let Some(s) = self.mcmc_step_size {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig("mcmc_step_size must be nonnegative".into()));
            }
        }
        self.sampler.validate()
    }

    /// Homotopy schedule for an assimilation step with observation `y`.
    pub fn schedule(&self, model: &StateSpaceModel, y: &[f64]) -> Result<HomotopySchedule> {
        let h = self
            .homotopy
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no homotopy section", self.kind)))?;
        let b = self.intermediate.build(y, model.observation().as_ref(), model.dt())?;
        HomotopySchedule::new(h.betas(), b)
    }
}

/// Per-step bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Largest `|F(x) - gamma - xi^T xi / 2| / (1 + xi^T xi)` over implicit samples.
    pub max_residual_ratio: f64,
    /// Optimizer iterations summed per solve index (one solve per homotopy level for DHIPF).
    pub solve_iterations: Vec<u64>,
    pub solve_count: Vec<u64>,
    pub mcmc_accepted: u64,
    pub mcmc_proposed: u64,
    /// ESS of the weights before resampling.
    pub ess: Option<f64>,
}

impl StepDiagnostics {
    pub(crate) fn record_solve(&mut self, index: usize, iterations: usize, residual_ratio: f64) {
        if self.solve_iterations.len() <= index {
            self.solve_iterations.resize(index + 1, 0);
            self.solve_count.resize(index + 1, 0);
        }
        self.solve_iterations[index] += iterations as u64;
        self.solve_count[index] += 1;
        self.max_residual_ratio = self.max_residual_ratio.max(residual_ratio);
    }

    pub fn merge(&mut self, other: &StepDiagnostics) {
        self.max_residual_ratio = self.max_residual_ratio.max(other.max_residual_ratio);
        let n = self.solve_iterations.len().max(other.solve_iterations.len());
        self.solve_iterations.resize(n, 0);
        self.solve_count.resize(n, 0);
        for (i, (it, c)) in other.solve_iterations.iter().zip(&other.solve_count).enumerate() {
            self.solve_iterations[i] += it;
            self.solve_count[i] += c;
        }
        self.mcmc_accepted += other.mcmc_accepted;
        self.mcmc_proposed += other.mcmc_proposed;
        self.ess = match (self.ess, other.ess) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }

    /// Mean optimizer iterations for each solve index.
    pub fn mean_iterations(&self) -> Vec<f64> {
        self.solve_iterations
            .iter()
            .zip(&self.solve_count)
            .map(|(&it, &c)| if c == 0 { 0.0 } else { it as f64 / c as f64 })
            .collect()
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.mcmc_proposed > 0).then(|| self.mcmc_accepted as f64 / self.mcmc_proposed as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub ensemble: Ensemble,
    /// Posterior-mean estimate, taken before resampling.
    pub estimate: Vec<f64>,
    /// Log-weights before resampling (absent for EnKF and pure prediction).
    pub log_weights: Option<Vec<f64>>,
    pub diagnostics: StepDiagnostics,
}

/// Adds stored log-weights of the incoming ensemble to new incremental ones.
pub(crate) fn with_prior(ensemble: &Ensemble, mut log_w: Vec<f64>) -> Vec<f64> {
    if let Some(prior) = &ensemble.log_weights {
        log_w.iter_mut().zip(prior).for_each(|(w, p)| *w += p);
    }
    log_w
}

pub(crate) fn check_input(model: &StateSpaceModel, ensemble: &Ensemble, y: &[f64]) -> Result<()> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    check_dim(model.state_dim(), ensemble.dim())?;
    check_dim(model.obs_dim(), y.len())
}

/// Weighted estimate, then (optionally) resampling with the step's resample stream.
pub(crate) fn finish_weighted(
    particles: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    step: usize,
    streams: &StepStreams,
    scheme: ResamplingScheme,
    do_resample: bool,
    mut diagnostics: StepDiagnostics,
) -> Result<StepOutput> {
    let weights = normalize_weights(&log_w)?;
    let estimate = weighted_mean(&particles, &weights);
    diagnostics.ess = Some(effective_sample_size(&weights));
    let ensemble = if do_resample {
        let idx = resample_indices(&weights, particles.len(), scheme, &mut streams.resample())?;
        Ensemble { particles: gather_owned(particles, &idx), log_weights: None, step }
    } else {
        Ensemble::weighted(particles, log_w.clone(), step)?
    };
    Ok(StepOutput { ensemble, estimate, log_weights: Some(log_w), diagnostics })
}

/// Propagation through the model without an observation. Weights are kept.
pub fn predict_step(model: &StateSpaceModel, ensemble: &Ensemble, streams: &StepStreams) -> Result<StepOutput> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    check_dim(model.state_dim(), ensemble.dim())?;
    let particles =
        map_particles(ensemble.len(), |i| Ok(model.sample_transition(&ensemble.particles[i], &mut streams.particle(i))))?;
    let weights = ensemble.weights()?;
    let estimate = weighted_mean(&particles, &weights);
    let ensemble =
        Ensemble { particles, log_weights: ensemble.log_weights.clone(), step: ensemble.step + 1 };
    Ok(StepOutput { ensemble, estimate, log_weights: None, diagnostics: StepDiagnostics::default() })
}

/// One assimilation step of the configured filter.
pub fn assimilate(
    model: &StateSpaceModel,
    config: &FilterConfig,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
) -> Result<StepOutput> {
    match config.kind {
        FilterKind::Bootstrap => bootstrap_step(model, ensemble, y, streams, config),
        FilterKind::Apf => apf_step(model, ensemble, y, streams, config),
        FilterKind::Enkf => enkf_step(model, ensemble, y, streams),
        FilterKind::Ipf => ipf_step(model, ensemble, y, streams, config),
        FilterKind::Dhpf => dhpf_mcmc_step(model, ensemble, y, streams, &config.schedule(model, y)?, config),
        FilterKind::Dhipf => dhipf_step(model, ensemble, y, streams, &config.schedule(model, y)?, config),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// `estimates.states[0]` is the initial state; entry `n` is the estimate at step `n`.
    pub estimates: Trajectory,
    pub diagnostics: StepDiagnostics,
    /// Ensemble after the last step.
    pub final_ensemble: Ensemble,
}

/// Runs a filter from a point mass at `x0` for `n_steps` steps. Steps without
/// an observation are pure predictions.
pub fn run_filter(
    model: &StateSpaceModel,
    config: &FilterConfig,
    x0: &[f64],
    observations: &ObservationSeries,
    n_steps: usize,
) -> Result<FilterRun> {
    run_filter_with(model, config, x0, observations, n_steps, |_, _| {})
}

/// [`run_filter`] with a callback seeing each step's input ensemble and output.
pub fn run_filter_with<C>(
    model: &StateSpaceModel,
    config: &FilterConfig,
    x0: &[f64],
    observations: &ObservationSeries,
    n_steps: usize,
    mut inspect: C,
) -> Result<FilterRun>
where
    C: FnMut(&Ensemble, &StepOutput),
{
    config.validate()?;
    check_dim(model.state_dim(), x0.len())?;
    let streams = RngStreams::new(config.seed);
    let mut ensemble = Ensemble::point_mass(x0, config.ensemble_size())?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.to_vec());
    let mut diagnostics = StepDiagnostics::default();
    for n in 1..=n_steps {
        let s = streams.step(n);
        let out = match observations.at(n) {
            Some(y) => assimilate(model, config, &ensemble, y, &s)?,
            None => predict_step(model, &ensemble, &s)?,
        };
        inspect(&ensemble, &out);
        diagnostics.merge(&out.diagnostics);
        states.push(out.estimate.clone());
        ensemble = out.ensemble;
        ensemble.step = n;
    }
    Ok(FilterRun { estimates: Trajectory::new(states), diagnostics, final_ensemble: ensemble })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homotopy_required_iff_homotopy_filter() {
        for kind in FilterKind::ALL {
            assert!(FilterConfig::new(kind).validate().is_ok(), "{kind}");
        }
        let mut c = FilterConfig::new(FilterKind::Dhipf);
        c.homotopy = None;
        assert!(c.validate().is_err());
        let mut c = FilterConfig::new(FilterKind::Ipf);
        c.homotopy = Some(HomotopyConfig::linear(2));
        assert!(c.validate().is_err());
        assert!(FilterConfig::new(FilterKind::Bootstrap).with_particles(0).validate().is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("DHIPF".parse::<FilterKind>().unwrap(), FilterKind::Dhipf);
        assert_eq!(" enkf".parse::<FilterKind>().unwrap(), FilterKind::Enkf);
        assert!("kalman".parse::<FilterKind>().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = FilterConfig::new(FilterKind::Dhipf).with_levels(3).with_seed(9);
        let text = serde_json::to_string(&c).unwrap();
        let back: FilterConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let minimal: FilterConfig = serde_json::from_str(r#"{"kind":"ipf"}"#).unwrap();
        assert_eq!(minimal, FilterConfig::new(FilterKind::Ipf));
        assert!(serde_json::from_str::<FilterConfig>(r#"{"kind":"ipf","particles":3}"#).is_err());
    }

    #[test]
    fn diagnostics_merge() {
        let mut a = StepDiagnostics { solve_iterations: vec![2], solve_count: vec![1], ess: Some(5.0), ..Default::default() };
        let b = StepDiagnostics {
            solve_iterations: vec![4, 1],
            solve_count: vec![2, 1],
            ess: Some(3.0),
            max_residual_ratio: 1e-14,
            ..Default::default()
        };
        a.merge(&b);
        assert_eq!(a.solve_iterations, vec![6, 1]);
        assert_eq!(a.mean_iterations(), vec![2.0, 1.0]);
        assert_eq!(a.ess, Some(3.0));
    }
}
