//! Bootstrap and auxiliary particle filters.

use crate::density::diag_logpdf;
use crate::error::Result;
use crate::model::StateSpaceModel;
use crate::particles::{normalize_weights, resample_indices, Ensemble};
use crate::rng::StepStreams;

use super::{check_input, finish_weighted, map_particles, with_prior, FilterConfig, StepDiagnostics, StepOutput};

fn loglik(model: &StateSpaceModel, x: &[f64], y: &[f64]) -> f64 {
    let gx = model.observation().eval(x);
    diag_logpdf(y, &gx, model.obs_noise_scale())
}

/// Propagate every particle through the model, weight by the likelihood, resample.
pub fn bootstrap_step(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
    config: &FilterConfig,
) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let moved = map_particles(ensemble.len(), |i| {
        let x = model.sample_transition(&ensemble.particles[i], &mut streams.particle(i));
        let lw = loglik(model, &x, y);
        Ok((x, lw))
    })?;
    let (particles, log_w): (Vec<_>, Vec<_>) = moved.into_iter().unzip();
    let log_w = with_prior(ensemble, log_w);
    finish_weighted(particles, log_w, ensemble.step + 1, streams, config.resampling, true, StepDiagnostics::default())
}

/// Likelihood at each particle's predicted mean, and the first-stage
/// log-weights (that likelihood plus any stored prior weight).
pub(crate) fn apf_first_stage(model: &StateSpaceModel, ensemble: &Ensemble, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ll: Vec<f64> = ensemble.particles.iter().map(|x| loglik(model, &model.predict_mean(x), y)).collect();
    let first = with_prior(ensemble, ll.clone());
    (ll, first)
}

/// Auxiliary particle filter: pick ancestors by the likelihood of their
/// predicted means, propagate, and correct with a second-stage weight.
pub fn apf_step(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
    config: &FilterConfig,
) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let (first_ll, first_lw) = apf_first_stage(model, ensemble, y);
    let first_w = normalize_weights(&first_lw)?;
    let ancestors = resample_indices(&first_w, ensemble.len(), config.resampling, &mut streams.aux(0))?;
    let moved = map_particles(ensemble.len(), |i| {
        let a = ancestors[i];
        let x = model.sample_transition(&ensemble.particles[a], &mut streams.particle(i));
        let lw = loglik(model, &x, y) - first_ll[a];
        Ok((x, lw))
    })?;
    let (particles, log_w): (Vec<_>, Vec<_>) = moved.into_iter().unzip();
    finish_weighted(particles, log_w, ensemble.step + 1, streams, config.resampling, true, StepDiagnostics::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::FilterKind;
    use crate::model::NoiseScaling;

    #[test]
    fn zero_noise_is_deterministic_propagation() {
        let m = StateSpaceModel::double_well(1.0, 0.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let ens = Ensemble::point_mass(&[0.6], 50).unwrap();
        let s = crate::rng::RngStreams::new(1).step(1);
        for step in [bootstrap_step, apf_step] {
            let out = step(&m, &ens, &[-3.0], &s, &FilterConfig::new(FilterKind::Bootstrap)).unwrap();
            for p in &out.ensemble.particles {
                assert!((p[0] - 0.60384).abs() < 1e-15);
            }
            assert!((out.estimate[0] - 0.60384).abs() < 1e-14);
        }
    }

    #[test]
    fn dominant_particle_takes_over() {
        // likelihood ratio 1e6 : 1 between two deterministic particles; over 1000
        // seeds the minority survives with probability 2 * 1e-6 per draw at most.
        let m = StateSpaceModel::double_well(1.0, 0.0, 1.0, 0.01, NoiseScaling::SqrtDt).unwrap();
        let a = m.predict_mean(&[0.0])[0];
        let b = m.predict_mean(&[1.0])[0];
        // choose y so that loglik(a) - loglik(b) = ln(1e6)
        let y = 0.5 * (a + b) - (1e6f64).ln() / (b - a);
        let ens = Ensemble::new(vec![vec![0.0], vec![1.0]], 0).unwrap();
        let mut minority = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let s = crate::rng::RngStreams::new(seed).step(1);
            let out = bootstrap_step(&m, &ens, &[y], &s, &FilterConfig::new(FilterKind::Bootstrap)).unwrap();
            minority += out.ensemble.particles.iter().filter(|p| (p[0] - b).abs() < 1e-12).count();
            total += 2;
        }
        assert!(minority as f64 / total as f64 <= 1e-4, "{minority}/{total}");
    }

    #[test]
    fn flat_likelihood_gives_uniform_first_stage() {
        let m = StateSpaceModel::double_well(1.0, 1.0, 1e6, 0.01, NoiseScaling::SqrtDt).unwrap();
        let ens = Ensemble::new((0..20).map(|i| vec![i as f64 * 0.1 - 1.0]).collect(), 0).unwrap();
        let (_, lw) = apf_first_stage(&m, &ens, &[0.5]);
        let w = normalize_weights(&lw).unwrap();
        for wi in w {
            assert!((wi - 0.05).abs() < 1e-6);
        }
    }
}
