//! Reference filters used as oracles by the integration tests.

#![allow(dead_code)]

use dhipf::{drift_doublewell, ObservationSeries};

/// Exact Kalman filter for `x' = a x + sigma w`, `y = x + r v`, started from a
/// point mass. Returns `(mean, variance)` for steps `1..=n_steps`.
pub fn kalman_1d(a: f64, sigma: f64, r: f64, x0: f64, obs: &ObservationSeries, n_steps: usize) -> Vec<(f64, f64)> {
    let (mut m, mut p) = (x0, 0.0);
    let mut out = Vec::with_capacity(n_steps);
    for n in 1..=n_steps {
        m *= a;
        p = a * a * p + sigma * sigma;
        if let Some(y) = obs.at(n) {
            let k = p / (p + r * r);
            m += k * (y[0] - m);
            p *= 1.0 - k;
        }
        out.push((m, p));
    }
    out
}

/// Point-mass (grid) filter for the scalar double-well model with Gaussian
/// transition `N(x + f(x) dt, s^2)` and observation `N(x, r^2)`.
///
/// The transition kernel is truncated at eight standard deviations. Returns
/// posterior means for steps `1..=n_steps`.
pub struct GridFilter {
    pub alpha: f64,
    pub s: f64,
    pub r: f64,
    pub dt: f64,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridFilter {
    fn nodes(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }

    fn predict_from_point(&self, nodes: &[f64], x: f64, out: &mut [f64]) {
        let m = x + drift_doublewell(x, self.alpha) * self.dt;
        for (o, z) in out.iter_mut().zip(nodes) {
            let e = (z - m) / self.s;
            *o = (-0.5 * e * e).exp();
        }
    }

    pub fn posterior_means(&self, x0: f64, obs: &ObservationSeries, n_steps: usize) -> Vec<f64> {
        let nodes = self.nodes();
        let h = nodes[1] - nodes[0];
        let band = (8.0 * self.s / h).ceil() as usize + 1;
        let mut density = vec![0.0; self.points];
        self.predict_from_point(&nodes, x0, &mut density);
        let mut means = Vec::with_capacity(n_steps);
        let mut scratch = vec![0.0; self.points];
        for n in 1..=n_steps {
            if n > 1 {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                for (w, xj) in density.iter().zip(&nodes) {
                    if *w == 0.0 {
                        continue;
                    }
                    let m = xj + drift_doublewell(*xj, self.alpha) * self.dt;
                    let centre = ((m - self.lo) / h).round() as isize;
                    let from = (centre - band as isize).max(0) as usize;
                    let to = ((centre + band as isize) as usize).min(self.points - 1);
                    for i in from..=to {
                        let e = (nodes[i] - m) / self.s;
                        scratch[i] += w * (-0.5 * e * e).exp();
                    }
                }
                std::mem::swap(&mut density, &mut scratch);
            }
            if let Some(y) = obs.at(n) {
                for (d, z) in density.iter_mut().zip(&nodes) {
                    let e = (y[0] - z) / self.r;
                    *d *= (-0.5 * e * e).exp();
                }
            }
            let total: f64 = density.iter().sum();
            density.iter_mut().for_each(|d| *d /= total);
            means.push(density.iter().zip(&nodes).map(|(d, z)| d * z).sum());
        }
        means
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
