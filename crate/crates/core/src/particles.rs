//! Particle ensembles, importance weights, resampling and point estimates.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// `N_p` particles with optional log-weights (absent means uniform).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: Vec<Vec<f64>>,
    pub log_weights: Option<Vec<f64>>,
    pub step: usize,
}

impl Ensemble {
    pub fn new(particles: Vec<Vec<f64>>, step: usize) -> Result<Self> {
        let d = particles.first().ok_or(Error::EmptyEnsemble)?.len();
        for p in &particles {
            check_dim(d, p.len())?;
        }
        Ok(Self { particles, log_weights: None, step })
    }

    pub fn weighted(particles: Vec<Vec<f64>>, log_weights: Vec<f64>, step: usize) -> Result<Self> {
        check_dim(particles.len(), log_weights.len())?;
        let mut e = Self::new(particles, step)?;
        e.log_weights = Some(log_weights);
        Ok(e)
    }

    /// `n` copies of `x`.
    pub fn point_mass(x: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Self::new(vec![x.to_vec(); n], 0)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles.first().map_or(0, Vec::len)
    }

    /// Normalized weights (uniform when no log-weights are stored).
    pub fn weights(&self) -> Result<Vec<f64>> {
        match &self.log_weights {
            Some(lw) => normalize_weights(lw),
            None => Ok(vec![1.0 / self.len() as f64; self.len()]),
        }
    }

    /// Columns `step, particle_index, x_0..x_{d-1}, weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let weights = self.weights()?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "particle_index".to_string()];
        header.extend((0..self.dim()).map(|k| format!("x_{k}")));
        header.push("weight".into());
        w.write_record(&header)?;
        for (i, (p, wt)) in self.particles.iter().zip(&weights).enumerate() {
            let mut row = vec![self.step.to_string(), i.to_string()];
            row.extend(p.iter().map(f64::to_string));
            row.push(wt.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exponentiates log-weights after max subtraction and normalizes them.
pub fn normalize_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &lw) in log_weights.iter().enumerate() {
        if lw.is_nan() || lw == f64::INFINITY {
            return Err(Error::NonFiniteWeight(i));
        }
        max = max.max(lw);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    /// Independent uniform draw per output particle (multinomial).
    #[default]
    InverseCdf,
    /// One uniform offset shared by `N_p` evenly spaced points.
    Systematic,
}

fn check_normalized(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::UnnormalizedWeights(total));
    }
    Ok(())
}

/// Index of the cumulative-weight interval containing `u`. A draw that lands
/// exactly on a boundary goes to the interval on its right; draws beyond the
/// (rounded) total fall back to the last particle with positive weight.
fn locate(cumulative: &[f64], u: f64, last_positive: usize) -> usize {
    let i = cumulative.partition_point(|&c| c <= u);
    i.min(last_positive)
}

/// Ancestor indices for `n` draws from normalized `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    scheme: ResamplingScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_normalized(weights)?;
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let last_positive = weights.iter().rposition(|w| *w > 0.0).ok_or(Error::DegenerateWeights)?;
    let indices = match scheme {
        ResamplingScheme::InverseCdf => (0..n)
            .map(|_| locate(&cumulative, rng.random::<f64>(), last_positive))
            .collect(),
        ResamplingScheme::Systematic => {
            let offset: f64 = rng.random();
            (0..n)
                .map(|k| locate(&cumulative, (k as f64 + offset) / n as f64, last_positive))
                .collect()
        }
    };
    Ok(indices)
}

/// Multinomial resampling by per-draw inverse CDF. The output is uniform-weighted.
pub fn resample_inverse_cdf<R: Rng + ?Sized>(ensemble: &Ensemble, weights: &[f64], rng: &mut R) -> Result<Ensemble> {
    resample(ensemble, weights, ResamplingScheme::InverseCdf, rng)
}

pub fn resample<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    weights: &[f64],
    scheme: ResamplingScheme,
    rng: &mut R,
) -> Result<Ensemble> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    check_dim(ensemble.len(), weights.len())?;
    let idx = resample_indices(weights, ensemble.len(), scheme, rng)?;
    Ok(Ensemble {
        particles: idx.iter().map(|&i| ensemble.particles[i].clone()).collect(),
        log_weights: None,
        step: ensemble.step,
    })
}

/// `particles[idx[k]]` for each `k`, moving each particle into its last slot
/// instead of cloning it.
pub(crate) fn gather_owned(particles: Vec<Vec<f64>>, idx: &[usize]) -> Vec<Vec<f64>> {
    let mut last_use = vec![usize::MAX; particles.len()];
    for (k, &i) in idx.iter().enumerate() {
        last_use[i] = k;
    }
    let mut source: Vec<Option<Vec<f64>>> = particles.into_iter().map(Some).collect();
    idx.iter()
        .enumerate()
        .map(|(k, &i)| {
            if last_use[i] == k {
                source[i].take().expect("each particle is moved once")
            } else {
                source[i].as_ref().expect("moved only at its last use").clone()
            }
        })
        .collect()
}

/// Weighted (or uniform) componentwise particle mean.
pub fn estimate_mean(ensemble: &Ensemble) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let weights = ensemble.weights()?;
    Ok(weighted_mean(&ensemble.particles, &weights))
}

pub(crate) fn weighted_mean(particles: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let d = particles[0].len();
    let mut mean = vec![0.0; d];
    for (p, w) in particles.iter().zip(weights) {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += w * x;
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_weights(&[0.0, 0.0, 0.0]).unwrap();
        assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));
        let w = normalize_weights(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        let w = normalize_weights(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(&w, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    }

    #[test]
    fn normalize_degenerate() {
        assert!(matches!(normalize_weights(&[f64::NEG_INFINITY; 4]), Err(Error::DegenerateWeights)));
        assert!(matches!(normalize_weights(&[0.0, f64::NAN]), Err(Error::NonFiniteWeight(1))));
    }

    #[test]
    fn normalize_extreme_range() {
        let w = normalize_weights(&[-1e5, -1e5 - 2f64.ln(), -3e5]).unwrap();
        assert!(close(&w, &[2.0 / 3.0, 1.0 / 3.0, 0.0], 1e-12));
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[0.05; 20]) - 20.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[0.0, 1.0, 0.0]), 1.0);
        assert_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn resample_one_hot() {
        let e = Ensemble::new(vec![vec![1.0], vec![2.0], vec![3.0]], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = resample_inverse_cdf(&e, &[1.0, 0.0, 0.0], &mut rng).unwrap();
        assert_eq!(out.particles, vec![vec![1.0]; 3]);
        assert!(out.log_weights.is_none());
        assert_eq!(out.step, 4);
        assert!((effective_sample_size(&out.weights().unwrap()) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn resample_rejects_unnormalized() {
        let e = Ensemble::new(vec![vec![1.0], vec![2.0]], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(resample_inverse_cdf(&e, &[0.5, 0.6], &mut rng), Err(Error::UnnormalizedWeights(_))));
        assert!(resample_inverse_cdf(&e, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn boundary_draw_goes_right() {
        let cumulative = [0.25, 0.5, 1.0];
        assert_eq!(locate(&cumulative, 0.25, 2), 1);
        assert_eq!(locate(&cumulative, 0.2499, 2), 0);
        assert_eq!(locate(&cumulative, 0.0, 2), 0);
        // zero-weight head: u = 0 must skip it
        assert_eq!(locate(&[0.0, 1.0], 0.0, 1), 1);
        // rounded total below 1
        assert_eq!(locate(&[0.3, 0.9999999999], 0.99999999995, 1), 1);
    }

    /// Exact `P(|C - n p| > k sd)` for `C ~ Binomial(n, p)`.
    fn binomial_outside(n: usize, p: f64, k: f64) -> f64 {
        let mean = n as f64 * p;
        let bound = k * (mean * (1.0 - p)).sqrt();
        let mut log_pmf = n as f64 * (1.0 - p).ln();
        let mut inside = 0.0;
        for c in 0..=n {
            if c > 0 {
                log_pmf += ((n - c + 1) as f64).ln() - (c as f64).ln() + p.ln() - (1.0 - p).ln();
            }
            if (c as f64 - mean).abs() <= bound {
                inside += log_pmf.exp();
            } else if c as f64 > mean {
                break;
            }
        }
        1.0 - inside
    }

    #[test]
    fn multinomial_concentration_oracle() {
        // Copy counts are Binomial(N, w). With w = 1/N the law is close to
        // Poisson(1), so a small fraction of counts legitimately leaves the
        // 4 sd band; compare the number of exceedances with the exact tail.
        let n = 10_000;
        let seeds = 100;
        let w = vec![1.0 / n as f64; n];
        let bound = 4.0 * (n as f64 * w[0] * (1.0 - w[0])).sqrt();
        let mut outside = 0usize;
        let mut pooled = vec![0usize; n];
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = resample_indices(&w, n, ResamplingScheme::InverseCdf, &mut rng).unwrap();
            let mut counts = vec![0usize; n];
            idx.iter().for_each(|&i| counts[i] += 1);
            outside += counts.iter().filter(|&&c| (c as f64 - 1.0).abs() > bound).count();
            counts.iter().zip(pooled.iter_mut()).for_each(|(c, p)| *p += c);
        }
        let expected = binomial_outside(n, w[0], 4.0) * (n * seeds as usize) as f64;
        assert!(
            (outside as f64 - expected).abs() < 5.0 * expected.sqrt(),
            "{outside} exceedances, expected {expected:.1}"
        );
        // pooled over seeds each count is Binomial(N * seeds, w): mean 100
        let pooled_bound = 4.0 * (seeds as f64 * (1.0 - w[0])).sqrt();
        let pooled_out = pooled.iter().filter(|&&c| (c as f64 - seeds as f64).abs() > pooled_bound).count();
        let pooled_expected = binomial_outside(n * seeds as usize, w[0], 4.0) * n as f64;
        assert!(
            (pooled_out as f64) < pooled_expected + 5.0 * pooled_expected.sqrt().max(1.0),
            "{pooled_out} pooled exceedances, expected {pooled_expected:.2}"
        );
    }

    #[test]
    fn resampling_is_unbiased() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let particles: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample::<f64, _>(StandardNormal) * 2.0]).collect();
        let lw: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let w = normalize_weights(&lw).unwrap();
        let e = Ensemble::new(particles.clone(), 0).unwrap();
        let target = weighted_mean(&particles, &w)[0];
        let var: f64 = particles.iter().zip(&w).map(|(p, wi)| wi * (p[0] - target).powi(2)).sum();
        let reps = 1000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let out = resample_inverse_cdf(&e, &w, &mut rng).unwrap();
            acc += estimate_mean(&out).unwrap()[0];
        }
        let avg = acc / reps as f64;
        let tol = 3.0 * var.sqrt() / ((reps * n) as f64).sqrt();
        assert!((avg - target).abs() < tol, "{avg} vs {target} (tol {tol})");
    }

    #[test]
    fn systematic_preserves_counts() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = resample_indices(&w, 10, ResamplingScheme::Systematic, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        idx.iter().for_each(|&i| counts[i] += 1);
        for (c, wi) in counts.iter().zip(w) {
            assert!((*c as f64 - 10.0 * wi).abs() < 1.0 + 1e-12);
        }
    }

    #[test]
    fn mean_examples() {
        let e = Ensemble::new(vec![vec![1.0], vec![3.0]], 0).unwrap();
        assert_eq!(estimate_mean(&e).unwrap(), vec![2.0]);
        let e = Ensemble::weighted(vec![vec![0.0], vec![10.0]], vec![0.9f64.ln(), 0.1f64.ln()], 0).unwrap();
        assert!((estimate_mean(&e).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_clt_bound() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Ensemble::new((0..n).map(|_| vec![rng.sample(StandardNormal)]).collect(), 0).unwrap();
        assert!(estimate_mean(&e).unwrap()[0].abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn snapshot_csv() {
        let e = Ensemble::weighted(vec![vec![0.5, 1.0], vec![2.0, 3.0]], vec![0.0, 0.0], 7).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,particle_index,x_0,x_1,weight"));
        assert_eq!(lines.next(), Some("7,0,0.5,1,0.5"));
    }

    proptest! {
        #[test]
        fn normalize_shift_invariant(lw in proptest::collection::vec(-50.0f64..50.0, 1..40), c in -1e3f64..1e3) {
            let a = normalize_weights(&lw).unwrap();
            let shifted: Vec<f64> = lw.iter().map(|x| x + c).collect();
            let b = normalize_weights(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn resampling_preserves_support(lw in proptest::collection::vec(-5.0f64..5.0, 1..30), seed in any::<u64>()) {
            let particles: Vec<Vec<f64>> = (0..lw.len()).map(|i| vec![i as f64 * 0.37, -(i as f64)]).collect();
            let e = Ensemble::new(particles.clone(), 0).unwrap();
            let w = normalize_weights(&lw).unwrap();
            let out = resample_inverse_cdf(&e, &w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = resample_inverse_cdf(&e, &w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&out, &again);
            prop_assert_eq!(out.len(), e.len());
            for p in &out.particles {
                prop_assert!(particles.contains(p));
            }
        }
    }
}
