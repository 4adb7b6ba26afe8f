//! Stochastic ensemble Kalman filter with perturbed observations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::optimize::cholesky;
use crate::particles::Ensemble;
use crate::rng::StepStreams;

use super::{check_input, map_particles, StepDiagnostics, StepOutput};

/// Forecast every member, then shift it by `K (y + R eps - g(x))` with
/// `K = P_xy (P_yy + R^2)^{-1}` from ensemble covariances.
pub fn enkf_step(model: &StateSpaceModel, ensemble: &Ensemble, y: &[f64], streams: &StepStreams) -> Result<StepOutput> {
    check_input(model, ensemble, y)?;
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidConfig("EnKF needs at least two members".into()));
    }
    let d = model.state_dim();
    let m = model.obs_dim();
    let r = model.obs_noise_scale();
    let g = model.observation();

    let forecast = map_particles(n, |i| {
        let x = model.sample_transition(&ensemble.particles[i], &mut streams.particle(i));
        let gx = g.eval(&x);
        let mut aux = streams.aux(i);
        let innovation: Vec<f64> = (0..m)
            .map(|j| {
                let e: f64 = aux.sample(StandardNormal);
                y[j] + r[j] * e - gx[j]
            })
            .collect();
        Ok((x, gx, innovation))
    })?;

    let mut x_mean = vec![0.0; d];
    let mut g_mean = vec![0.0; m];
    for (x, gx, _) in &forecast {
        x_mean.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
        g_mean.iter_mut().zip(gx).for_each(|(a, b)| *a += b / n as f64);
    }
    let mut p_xy = vec![0.0; d * m];
    let mut p_yy = vec![0.0; m * m];
    for (x, gx, _) in &forecast {
        for a in 0..m {
            let ga = gx[a] - g_mean[a];
            for i in 0..d {
                p_xy[i * m + a] += (x[i] - x_mean[i]) * ga;
            }
            for b in 0..m {
                p_yy[a * m + b] += ga * (gx[b] - g_mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    p_xy.iter_mut().for_each(|v| *v /= denom);
    p_yy.iter_mut().for_each(|v| *v /= denom);
    for a in 0..m {
        p_yy[a * m + a] += r[a] * r[a];
    }
    // accumulation order can leave the sample covariance a few ulps asymmetric
    for a in 0..m {
        for b in 0..a {
            let s = 0.5 * (p_yy[a * m + b] + p_yy[b * m + a]);
            p_yy[a * m + b] = s;
            p_yy[b * m + a] = s;
        }
    }
    let s = cholesky(&p_yy, m).map_err(|_| Error::SingularInnovation)?;

    let particles: Vec<Vec<f64>> = forecast
        .into_iter()
        .map(|(mut x, _, mut innov)| {
            s.solve_in_place(&mut innov);
            for i in 0..d {
                x[i] += (0..m).map(|a| p_xy[i * m + a] * innov[a]).sum::<f64>();
            }
            x
        })
        .collect();
    let mut estimate = vec![0.0; d];
    for x in &particles {
        estimate.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
    }
    Ok(StepOutput {
        ensemble: Ensemble { particles, log_weights: None, step: ensemble.step + 1 },
        estimate,
        log_weights: None,
        diagnostics: StepDiagnostics::default(),
    })
}
