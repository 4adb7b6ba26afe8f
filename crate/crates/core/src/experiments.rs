//! Benchmark experiments: double-well Cases 1-3, Lorenz 63 tracking and the
//! observation-gap sweep, with metrics and result tables.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterConfig, FilterKind, StepDiagnostics};
use crate::model::{Identity, LinearDrift, Lorenz63, NoiseScaling, StateSpaceModel, Trajectory, simulate_truth};
use crate::rng::derive_seed;

const FILTER_LANE: u64 = 0xF1_17E5;

fn default_dt() -> f64 {
    0.01
}

fn default_one() -> usize {
    1
}

fn default_a1() -> f64 {
    10.0
}

fn default_a2() -> f64 {
    28.0
}

fn default_a3() -> f64 {
    8.0 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    DoubleWell {
        alpha: f64,
        sigma: f64,
        r: f64,
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default)]
        noise_scaling: NoiseScaling,
    },
    Lorenz63 {
        #[serde(default = "default_a1")]
        a1: f64,
        #[serde(default = "default_a2")]
        a2: f64,
        #[serde(default = "default_a3")]
        a3: f64,
        sigma: f64,
        r: f64,
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default)]
        noise_scaling: NoiseScaling,
    },
    /// Scalar `x' = a x + sigma w`, `y = x + r v` (one unit step per transition).
    Linear { a: f64, sigma: f64, r: f64 },
}

impl ModelSpec {
    pub fn build(&self) -> Result<StateSpaceModel> {
        match *self {
            Self::DoubleWell { alpha, sigma, r, dt, noise_scaling } => {
                StateSpaceModel::double_well(alpha, sigma, r, dt, noise_scaling)
            }
            Self::Lorenz63 { a1, a2, a3, sigma, r, dt, noise_scaling } => {
                StateSpaceModel::lorenz63(Lorenz63 { a1, a2, a3 }, sigma, r, dt, noise_scaling)
            }
            Self::Linear { a, sigma, r } => StateSpaceModel::new(
                Arc::new(LinearDrift::scalar(a - 1.0)),
                Arc::new(Identity { dim: 1 }),
                vec![sigma],
                vec![r],
                1.0,
                NoiseScaling::PerStep,
            ),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Lorenz63 { .. } => 3,
            _ => 1,
        }
    }

    pub fn set_noise_scaling(&mut self, scaling: NoiseScaling) {
        match self {
            Self::DoubleWell { noise_scaling, .. } | Self::Lorenz63 { noise_scaling, .. } => *noise_scaling = scaling,
            Self::Linear { .. } => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    pub x0: Vec<f64>,
    pub n_steps: usize,
    #[serde(default = "default_one")]
    pub gap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_at: Option<usize>,
    #[serde(default = "default_one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    pub filters: Vec<FilterConfig>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if self.gap == 0 {
            return bad("gap must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.x0.len() != self.model.dim() {
            return bad(format!("x0 has {} components, the model state has {}", self.x0.len(), self.model.dim()));
        }
        if let Some(k) = self.switch_at {
            if k == 0 || k > self.n_steps {
                return bad(format!("switch_at must lie in 1..={}", self.n_steps));
            }
        }
        if self.filters.is_empty() {
            return bad("at least one filter is required".into());
        }
        for (i, f) in self.filters.iter().enumerate() {
            f.validate().map_err(|e| Error::InvalidConfig(format!("filters[{i}]: {e}")))?;
        }
        self.model.build()?;
        Ok(())
    }

    /// Keeps only filters whose kind is listed.
    pub fn retain_filters(&mut self, kinds: &[FilterKind]) {
        self.filters.retain(|f| kinds.contains(&f.kind));
    }
}

fn all_filters(n_particles: usize) -> Vec<FilterConfig> {
    FilterKind::ALL.into_iter().map(|k| FilterConfig::new(k).with_particles(n_particles)).collect()
}

/// Double-well Case 1, 2 or 3.
pub fn double_well_case(case: u8) -> Result<ExperimentSpec> {
    let (alpha, sigma, r, switch_at) = match case {
        1 => (1.0, 1.5, 1.5, None),
        2 => (1.0, 1.0, 1.0, Some(150)),
        3 => (10.0, 1.0, 2.0, Some(150)),
        other => return Err(Error::InvalidConfig(format!("unknown double-well case {other}"))),
    };
    Ok(ExperimentSpec {
        name: format!("case{case}"),
        model: ModelSpec::DoubleWell { alpha, sigma, r, dt: 0.01, noise_scaling: NoiseScaling::SqrtDt },
        x0: vec![0.6],
        n_steps: 300,
        gap: 1,
        switch_at,
        repeats: 10,
        seed: 0,
        filters: all_filters(20),
    })
}

fn lorenz_model() -> ModelSpec {
    ModelSpec::Lorenz63 {
        a1: 10.0,
        a2: 28.0,
        a3: 8.0 / 3.0,
        sigma: 1.0,
        r: 1.0,
        dt: 0.01,
        noise_scaling: NoiseScaling::SqrtDt,
    }
}

fn lorenz_filters(n_particles: usize, levels: &[usize]) -> Vec<FilterConfig> {
    let mut f = vec![FilterConfig::new(FilterKind::Ipf).with_particles(n_particles)];
    f.extend(levels.iter().map(|&l| FilterConfig::new(FilterKind::Dhipf).with_particles(n_particles).with_levels(l)));
    f
}

pub const LORENZ_X0: [f64; 3] = [1.0, 1.0, 1.0];
pub const GAP_SWEEP_GAPS: [usize; 5] = [1, 2, 5, 10, 20];

pub fn lorenz_tracking() -> ExperimentSpec {
    ExperimentSpec {
        name: "lorenz-track".into(),
        model: lorenz_model(),
        x0: LORENZ_X0.to_vec(),
        n_steps: 4000,
        gap: 1,
        switch_at: None,
        repeats: 1,
        seed: 0,
        filters: lorenz_filters(10, &[2]),
    }
}

pub fn lorenz_rapid_change() -> ExperimentSpec {
    ExperimentSpec { name: "lorenz-switch".into(), n_steps: 600, ..lorenz_tracking() }
}

pub fn gap_sweep_entry(gap: usize) -> ExperimentSpec {
    ExperimentSpec {
        name: format!("gap-sweep-g{gap}"),
        model: lorenz_model(),
        x0: LORENZ_X0.to_vec(),
        n_steps: 1000,
        gap,
        switch_at: None,
        repeats: 20,
        seed: 0,
        filters: lorenz_filters(50, &[2, 3]),
    }
}

pub const PRESETS: [&str; 6] = ["case1", "case2", "case3", "lorenz-track", "lorenz-switch", "gap-sweep"];

/// Built-in experiment(s) by name; `gap-sweep` expands to one spec per gap.
pub fn preset(name: &str) -> Result<Vec<ExperimentSpec>> {
    Ok(match name {
        "case1" => vec![double_well_case(1)?],
        "case2" => vec![double_well_case(2)?],
        "case3" => vec![double_well_case(3)?],
        "lorenz-track" => vec![lorenz_tracking()],
        "lorenz-switch" => vec![lorenz_rapid_change()],
        "gap-sweep" => GAP_SWEEP_GAPS.iter().map(|&g| gap_sweep_entry(g)).collect(),
        other => return Err(Error::InvalidConfig(format!("unknown experiment `{other}`"))),
    })
}

/// Mean over entries of the squared Euclidean distance.
pub fn mse(estimates: &Trajectory, truth: &Trajectory) -> Result<f64> {
    Ok(squared_errors(estimates, truth)?.iter().sum::<f64>() / estimates.states.len() as f64)
}

pub fn squared_errors(estimates: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>> {
    if estimates.states.len() != truth.states.len() {
        return Err(Error::InvalidConfig(format!(
            "trajectory lengths differ: {} vs {}",
            estimates.states.len(),
            truth.states.len()
        )));
    }
    if estimates.states.is_empty() {
        return Err(Error::InvalidConfig("empty trajectories".into()));
    }
    estimates
        .states
        .iter()
        .zip(&truth.states)
        .map(|(e, t)| {
            crate::error::check_dim(t.len(), e.len())?;
            Ok(e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub experiment: String,
    pub filter: String,
    pub repeat: usize,
    pub seed: u64,
    /// Estimates for steps `0..=n_steps` (step 0 is the known initial state).
    pub estimates: Trajectory,
    /// Squared errors for steps `1..=n_steps`.
    pub squared_errors: Vec<f64>,
    pub mse: f64,
    pub wall_clock_seconds: f64,
    pub diagnostics: StepDiagnostics,
    pub failure: Option<String>,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    /// One truth per repeat, steps `0..=n_steps`.
    pub truths: Vec<Trajectory>,
    /// Ordered by repeat, then by filter in spec order.
    pub runs: Vec<RunResult>,
}

/// Seed for repeat `r`.
pub fn repeat_seed(spec_seed: u64, repeat: usize) -> u64 {
    derive_seed(spec_seed, repeat as u64)
}

/// Runs every filter on every repeat. Filters within a repeat see the same
/// observations and share RNG stream keys. A failing filter is recorded and
/// does not stop the others.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let model = spec.model.build()?;
    let per_repeat: Vec<(Trajectory, Vec<RunResult>)> = (0..spec.repeats)
        .into_par_iter()
        .map(|repeat| -> Result<_> {
            let seed = repeat_seed(spec.seed, repeat);
            let (truth, obs) = simulate_truth(&model, &spec.x0, spec.n_steps, spec.gap, seed, spec.switch_at)?;
            let tracked = Trajectory::new(truth.states[1..].to_vec());
            let runs = spec
                .filters
                .iter()
                .map(|cfg| {
                    let mut cfg = cfg.clone();
                    cfg.seed = derive_seed(derive_seed(seed, FILTER_LANE), cfg.seed);
                    let start = Instant::now();
                    let outcome = run_filter(&model, &cfg, &spec.x0, &obs, spec.n_steps);
                    let wall = start.elapsed().as_secs_f64();
                    let base = RunResult {
                        experiment: spec.name.clone(),
                        filter: cfg.label(),
                        repeat,
                        seed,
                        estimates: Trajectory::new(Vec::new()),
                        squared_errors: Vec::new(),
                        mse: f64::NAN,
                        wall_clock_seconds: wall,
                        diagnostics: StepDiagnostics::default(),
                        failure: None,
                    };
                    match outcome {
                        Ok(run) => {
                            let est = Trajectory::new(run.estimates.states[1..].to_vec());
                            let se = squared_errors(&est, &tracked).expect("filter output matches truth length");
                            let mse = se.iter().sum::<f64>() / se.len() as f64;
                            RunResult {
                                estimates: run.estimates,
                                squared_errors: se,
                                mse,
                                diagnostics: run.diagnostics,
                                ..base
                            }
                        }
                        Err(e) => RunResult { failure: Some(e.to_string()), ..base },
                    }
                })
                .collect();
            Ok((truth, runs))
        })
        .collect::<Result<_>>()?;
    let mut truths = Vec::with_capacity(spec.repeats);
    let mut runs = Vec::with_capacity(spec.repeats * spec.filters.len());
    for (t, r) in per_repeat {
        truths.push(t);
        runs.extend(r);
    }
    Ok(ExperimentResult { spec: spec.clone(), truths, runs })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub experiment: String,
    pub filter: String,
    pub repeats: usize,
    pub failed: usize,
    pub mse_mean: f64,
    pub mse_median: f64,
    pub mse_min: f64,
    pub mse_max: f64,
    pub wall_clock_mean_s: f64,
}

impl ReportRow {
    pub fn is_failed(&self) -> bool {
        self.failed > 0
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates runs per (experiment, filter) in first-seen order.
pub fn report(results: &[ExperimentResult]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for res in results {
        let mut labels: Vec<String> = Vec::new();
        for r in &res.runs {
            if !labels.contains(&r.filter) {
                labels.push(r.filter.clone());
            }
        }
        for label in labels {
            let runs: Vec<&RunResult> = res.runs.iter().filter(|r| r.filter == label).collect();
            let ok: Vec<f64> = runs.iter().filter(|r| !r.failed()).map(|r| r.mse).collect();
            let failed = runs.len() - ok.len();
            let agg = |f: fn(f64, f64) -> f64, init: f64| if ok.is_empty() { f64::NAN } else { ok.iter().copied().fold(init, f) };
            rows.push(ReportRow {
                experiment: res.spec.name.clone(),
                filter: label,
                repeats: runs.len(),
                failed,
                mse_mean: if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 },
                mse_median: median(&ok),
                mse_min: agg(f64::min, f64::INFINITY),
                mse_max: agg(f64::max, f64::NEG_INFINITY),
                wall_clock_mean_s: runs.iter().map(|r| r.wall_clock_seconds).sum::<f64>() / runs.len() as f64,
            });
        }
    }
    rows
}

/// Fixed-width text table of the report rows.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<13} {:>7} {:>11} {:>11} {:>11} {:>11} {:>10}",
        "experiment", "filter", "repeats", "mse_mean", "mse_median", "mse_min", "mse_max", "time_s"
    );
    for r in rows {
        if r.is_failed() {
            let _ = writeln!(
                out,
                "{:<16} {:<13} {:>7} {:>11} ({} of {} repeats failed)",
                r.experiment, r.filter, r.repeats, "failed", r.failed, r.repeats
            );
            continue;
        }
        let _ = writeln!(
            out,
            "{:<16} {:<13} {:>7} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>10.4}",
            r.experiment, r.filter, r.repeats, r.mse_mean, r.mse_median, r.mse_min, r.mse_max, r.wall_clock_mean_s
        );
    }
    out
}

fn state_columns(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (0..dim).map(|k| format!("{prefix}_x{k}")).collect()
    }
}

/// Writes `results.csv`, `summary.csv`, `trajectories.csv` and `errors.csv` into `dir`.
pub fn write_outputs(dir: &Path, results: &[ExperimentResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record(["experiment", "filter", "repeat", "seed", "mse", "wall_clock_s", "status"])?;
    for res in results {
        for r in &res.runs {
            let status = r.failure.as_ref().map_or("ok".to_string(), |e| format!("failed: {e}"));
            w.write_record([
                r.experiment.clone(),
                r.filter.clone(),
                r.repeat.to_string(),
                r.seed.to_string(),
                if r.failed() { String::new() } else { r.mse.to_string() },
                r.wall_clock_seconds.to_string(),
                status,
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in report(results) {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut traj = csv::WriterBuilder::new().flexible(true).from_path(dir.join("trajectories.csv"))?;
    let mut errs = csv::WriterBuilder::new().flexible(true).from_path(dir.join("errors.csv"))?;
    for res in results {
        let dim = res.spec.model.dim();
        let labels: Vec<String> = res.spec.filters.iter().map(FilterConfig::label).collect();
        let mut header = vec!["experiment".to_string(), "repeat".into(), "step".into()];
        header.extend(state_columns("truth", dim));
        for l in &labels {
            header.extend(state_columns(l, dim));
        }
        traj.write_record(&header)?;
        let mut eheader = vec!["experiment".to_string(), "repeat".into(), "step".into()];
        eheader.extend(labels.iter().cloned());
        errs.write_record(&eheader)?;

        for (repeat, truth) in res.truths.iter().enumerate() {
            let runs: Vec<&RunResult> = res.runs.iter().filter(|r| r.repeat == repeat).collect();
            for (step, t) in truth.states.iter().enumerate() {
                let mut row = vec![res.spec.name.clone(), repeat.to_string(), step.to_string()];
                row.extend(t.iter().map(f64::to_string));
                for r in &runs {
                    match r.estimates.states.get(step) {
                        Some(e) => row.extend(e.iter().map(f64::to_string)),
                        None => row.extend(std::iter::repeat_n(String::new(), dim)),
                    }
                }
                traj.write_record(&row)?;
                if step > 0 {
                    let mut erow = vec![res.spec.name.clone(), repeat.to_string(), step.to_string()];
                    erow.extend(
                        runs.iter().map(|r| r.squared_errors.get(step - 1).map_or(String::new(), f64::to_string)),
                    );
                    errs.write_record(&erow)?;
                }
            }
        }
    }
    traj.flush()?;
    errs.flush()?;
    Ok(())
}
