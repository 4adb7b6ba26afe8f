//! Implicit particle filter and its drift-homotopy variant.

use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use crate::error::Result;
use crate::implicit::{
    constant_hessian_factor, implicit_sample, implicit_sample_quadratic, objective_for, ImplicitObjective, WeightedSample,
};
use crate::optimize::{CholeskyFactor, Objective};
use crate::model::{Drift, StateSpaceModel};
use crate::particles::Ensemble;
use crate::rng::StepStreams;

use super::{
    check_input, finish_weighted, homotopy_drift, map_particles, with_prior, FilterConfig, HomotopySchedule,
    StepDiagnostics, StepOutput,
};

fn draw_xi<R: Rng>(rng: &mut R, d: usize) -> SmallVec<[f64; 8]> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample(
    obj: &ImplicitObjective,
    xi: &[f64],
    warm: &[f64],
    config: &FilterConfig,
    factor: Option<&CholeskyFactor>,
) -> Result<WeightedSample> {
    match factor {
        Some(f) if obj.constant_hessian() => implicit_sample_quadratic(obj, xi, warm, &config.sampler, f),
        _ => implicit_sample(obj, xi, warm, &config.sampler),
    }
}

/// Optimizer iterations and residual ratio of one solve.
type SolveStats = SmallVec<[(usize, f64); 4]>;

struct ParticleResult {
    x: Vec<f64>,
    log_weight: f64,
    solves: SolveStats,
}

fn finish(
    results: Vec<ParticleResult>,
    ensemble: &Ensemble,
    streams: &StepStreams,
    config: &FilterConfig,
) -> Result<StepOutput> {
    let mut diagnostics = StepDiagnostics::default();
    let mut particles = Vec::with_capacity(results.len());
    let mut log_w = Vec::with_capacity(results.len());
    for r in results {
        for (l, &(iterations, ratio)) in r.solves.iter().enumerate() {
            diagnostics.record_solve(l, iterations, ratio);
        }
        log_w.push(r.log_weight);
        particles.push(r.x);
    }
    let log_w = with_prior(ensemble, log_w);
    finish_weighted(particles, log_w, ensemble.step + 1, streams, config.resampling, config.final_resample, diagnostics)
}

/// Objective for particle 0 under `drift`. Every particle shares its noise
/// scales and observation, so the others are clones re-centred on their own
/// prediction.
fn template(model: &StateSpaceModel, drift: &dyn Drift, ensemble: &Ensemble, y: &[f64]) -> Result<ImplicitObjective> {
    objective_for(model, drift, &ensemble.particles[0], y)
}

/// With a linear observation every particle's objective has the same
/// constant Hessian, so it is factored once per step.
fn shared_factor(model: &StateSpaceModel, probe: &ImplicitObjective) -> Result<Option<CholeskyFactor>> {
    if !model.observation().is_linear() {
        return Ok(None);
    }
    constant_hessian_factor(probe).map(Some)
}

/// Implicit particle filter: each particle's sample solves
/// `F(x) - min F = xi^T xi / 2` for a fresh Gaussian `xi`, with the optimizer
/// started at the deterministic prediction.
pub fn ipf_step(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
    config: &FilterConfig,
) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let d = model.state_dim();
    let f = model.drift();
    let base = template(model, f.as_ref(), ensemble, y)?;
    let factor = shared_factor(model, &base)?;
    let results = map_particles(ensemble.len(), |i| {
        let run = || -> Result<ParticleResult> {
            let mut obj = base.clone();
            obj.repredict(model, f.as_ref(), &ensemble.particles[i])?;
            let xi = draw_xi(&mut streams.particle(i), d);
            let s = sample(&obj, &xi, obj.pred_mean(), config, factor.as_ref())?;
            let solves = smallvec::smallvec![(s.optimizer_iterations, s.residual_ratio())];
            Ok(ParticleResult { x: s.x.to_vec(), log_weight: s.log_weight, solves })
        };
        run().map_err(|e| e.at_particle(i))
    })?;
    finish(results, ensemble, streams, config)
}

/// Drift-homotopy implicit particle filter.
///
/// For each particle, solves the implicit-sampling equation at levels
/// `1..=L` of the homotopy in turn. The first solve starts the optimizer at
/// the deterministic prediction under its own level's drift; each later
/// level starts from the previous level's sample. Every level draws a fresh
/// reference variable from the particle's stream, and the final sample
/// carries the level-`L` weight. With `L = 1` this is exactly [`ipf_step`].
pub fn dhipf_step(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
    schedule: &HomotopySchedule,
    config: &FilterConfig,
) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let d = model.state_dim();
    let drifts = (1..=schedule.levels())
        .map(|l| homotopy_drift(schedule, model.drift(), l))
        .collect::<Result<Vec<_>>>()?;
    let base = template(model, drifts[0].as_ref(), ensemble, y).map_err(|e| e.at_level(0, 1))?;
    let factor = shared_factor(model, &base)?;
    let results = map_particles(ensemble.len(), |i| {
        let mut rng = streams.particle(i);
        let x_prev = &ensemble.particles[i];
        let mut obj = base.clone();
        let mut last: Option<WeightedSample> = None;
        let mut solves = SolveStats::new();
        for (k, drift) in drifts.iter().enumerate() {
            let level = k + 1;
            obj.repredict(model, drift.as_ref(), x_prev).map_err(|e| e.at_level(i, level))?;
            let xi = draw_xi(&mut rng, d);
            let warm = last.as_ref().map_or(obj.pred_mean(), |s| s.x.as_slice());
            let s = sample(&obj, &xi, warm, config, factor.as_ref()).map_err(|e| e.at_level(i, level))?;
            solves.push((s.optimizer_iterations, s.residual_ratio()));
            last = Some(s);
        }
        let last = last.expect("at least one homotopy level");
        Ok(ParticleResult { x: last.x.to_vec(), log_weight: last.log_weight, solves })
    })?;
    finish(results, ensemble, streams, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{FilterKind, HomotopySchedule};
    use crate::model::{LinearDrift, NoiseScaling};
    use crate::rng::RngStreams;
    use std::sync::Arc;

    #[test]
    fn small_noise_concentrates_at_gaussian_product_mean() {
        let sigma = 1e-3;
        let m = StateSpaceModel::double_well(1.0, sigma, 0.5, 0.01, NoiseScaling::PerStep).unwrap();
        let ens = Ensemble::point_mass(&[0.6], 30).unwrap();
        let out = ipf_step(&m, &ens, &[1.0], &RngStreams::new(2).step(1), &FilterConfig::new(FilterKind::Ipf)).unwrap();
        let mu = m.predict_mean(&[0.6])[0];
        let (pt, po) = (1.0 / (sigma * sigma), 1.0 / 0.25);
        let expected = (pt * mu + po * 1.0) / (pt + po);
        for p in &out.ensemble.particles {
            assert!((p[0] - expected).abs() < 5e-3);
        }
    }

    #[test]
    fn single_level_matches_ipf_bitwise() {
        let m = StateSpaceModel::double_well(1.0, 1.5, 1.5, 0.01, NoiseScaling::SqrtDt).unwrap();
        let ens = Ensemble::new((0..20).map(|i| vec![0.05 * i as f64 - 0.4]).collect(), 3).unwrap();
        let s = RngStreams::new(77).step(4);
        let ipf = ipf_step(&m, &ens, &[0.8], &s, &FilterConfig::new(FilterKind::Ipf)).unwrap();
        let cfg = FilterConfig::new(FilterKind::Dhipf).with_levels(1);
        let sched = cfg.schedule(&m, &[0.8]).unwrap();
        let dh = dhipf_step(&m, &ens, &[0.8], &s, &sched, &cfg).unwrap();
        assert_eq!(ipf.ensemble, dh.ensemble);
        assert_eq!(ipf.log_weights, dh.log_weights);
        assert_eq!(ipf.estimate, dh.estimate);
    }

    #[test]
    fn linear_schedule_records_each_level() {
        let m = StateSpaceModel::double_well(1.0, 1.5, 1.5, 0.01, NoiseScaling::SqrtDt).unwrap();
        let ens = Ensemble::point_mass(&[0.6], 10).unwrap();
        let cfg = FilterConfig::new(FilterKind::Dhipf).with_levels(3);
        let sched = cfg.schedule(&m, &[0.1]).unwrap();
        let out = dhipf_step(&m, &ens, &[0.1], &RngStreams::new(1).step(1), &sched, &cfg).unwrap();
        assert_eq!(out.diagnostics.solve_count, vec![10, 10, 10]);
        assert!(out.diagnostics.max_residual_ratio <= 1e-10);
    }

    #[test]
    fn linear_intermediate_drift_keeps_weights_constant() {
        // every level is Gaussian; at a point-mass input all final weights agree
        let m = StateSpaceModel::linear_gaussian(0.9, 1.0, 1.0).unwrap();
        let ens = Ensemble::point_mass(&[0.4], 50).unwrap();
        let mut cfg = FilterConfig::new(FilterKind::Dhipf);
        cfg.intermediate = crate::filters::IntermediateDrift::Custom(Arc::new(LinearDrift::scalar(-0.5)));
        let sched: HomotopySchedule = cfg.schedule(&m, &[1.0]).unwrap();
        let out = dhipf_step(&m, &ens, &[1.0], &RngStreams::new(3).step(1), &sched, &cfg).unwrap();
        let lw = out.log_weights.unwrap();
        for w in &lw {
            assert!((w - lw[0]).abs() <= 1e-8 * lw[0].abs().max(1.0));
        }
    }
}
