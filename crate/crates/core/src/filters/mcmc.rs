//! Drift homotopy particle filter with random-walk Metropolis transport.

use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use crate::density::diag_logpdf;
use crate::error::Result;
use crate::model::StateSpaceModel;
use crate::particles::{normalize_weights, resample_indices, Ensemble};
use crate::rng::StepStreams;

use super::{check_input, homotopy_drift, map_particles, with_prior, FilterConfig, HomotopySchedule, StepDiagnostics, StepOutput};

type Buf = SmallVec<[f64; 8]>;

/// Resample-move step.
///
/// Particles are first propagated and weighted by the likelihood to choose
/// ancestors. Each selected ancestor then seeds one Metropolis chain that
/// walks through the homotopy levels `0..=L`, targeting
/// `p_l(x | x_anc) p(y | x)` at level `l` and starting each level from the
/// previous level's final state (level 0 starts at its deterministic
/// prediction). The level-`L` states form a uniformly weighted ensemble.
pub fn dhpf_mcmc_step(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    y: &[f64],
    streams: &StepStreams,
    schedule: &HomotopySchedule,
    config: &FilterConfig,
) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let n = ensemble.len();
    let d = model.state_dim();
    let m = model.obs_dim();
    let g = model.observation();
    let r = model.obs_noise_scale();
    let scale = model.transition_scale();
    let loglik = |x: &[f64]| {
        let mut gx: Buf = SmallVec::from_elem(0.0, m);
        g.eval_into(x, &mut gx);
        diag_logpdf(y, &gx, r)
    };

    // selection: propagate once and weight by the likelihood
    let proposals = map_particles(n, |i| {
        let x = model.sample_transition(&ensemble.particles[i], &mut streams.particle(i));
        Ok(loglik(&x))
    })?;
    let sel_w = normalize_weights(&with_prior(ensemble, proposals))?;
    let ancestors = resample_indices(&sel_w, n, config.resampling, &mut streams.resample())?;

    let drifts =
        (0..=schedule.levels()).map(|l| homotopy_drift(schedule, model.drift(), l)).collect::<Result<Vec<_>>>()?;
    let step: Buf = match config.mcmc_step_size {
        Some(s) => SmallVec::from_elem(s, d),
        None => scale.iter().copied().collect(),
    };
    let zero_scale = scale.contains(&0.0);

    let chains = map_particles(n, |i| {
        let anc = &ensemble.particles[ancestors[i]];
        let mut rng = streams.aux(i);
        let mut pred: Buf = SmallVec::from_elem(0.0, d);
        let mut x: Buf = SmallVec::new();
        let mut prop: Buf = SmallVec::from_elem(0.0, d);
        let mut accepted = 0u64;
        let mut proposed = 0u64;
        for drift in &drifts {
            model.predict_mean_into(drift.as_ref(), anc, &mut pred);
            if x.is_empty() {
                x.extend_from_slice(&pred);
            }
            let target = |z: &[f64]| {
                if zero_scale {
                    loglik(z)
                } else {
                    diag_logpdf(z, &pred, scale) + loglik(z)
                }
            };
            let mut cur = target(&x);
            for _ in 0..config.mcmc_steps {
                for k in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    prop[k] = x[k] + step[k] * e;
                }
                let cand = target(&prop);
                let u: f64 = rng.random();
                proposed += 1;
                if cand - cur >= 0.0 || u.ln() < cand - cur {
                    x.copy_from_slice(&prop);
                    cur = cand;
                    accepted += 1;
                }
            }
        }
        Ok((x.to_vec(), accepted, proposed))
    })?;

    let mut diagnostics = StepDiagnostics { ess: Some(crate::particles::effective_sample_size(&sel_w)), ..Default::default() };
    let mut particles = Vec::with_capacity(n);
    for (x, a, p) in chains {
        particles.push(x);
        diagnostics.mcmc_accepted += a;
        diagnostics.mcmc_proposed += p;
    }
    let mut estimate = vec![0.0; d];
    for x in &particles {
        estimate.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
    }
    Ok(StepOutput {
        ensemble: Ensemble { particles, log_weights: None, step: ensemble.step + 1 },
        estimate,
        log_weights: None,
        diagnostics,
    })
}
