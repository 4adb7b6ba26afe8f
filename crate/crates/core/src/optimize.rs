//! Small dense minimization and the random-map inversion used by implicit sampling.
//!
//! Matrices are row-major `Vec<f64>` of size `d * d`; the state dimension is
//! expected to be small (a handful of components).

use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result};

type Buf = SmallVec<[f64; 4]>;

/// A point in state space, inline for low dimensions.
pub type Point = SmallVec<[f64; 4]>;
type MatBuf = SmallVec<[f64; 9]>;

/// Runs `f` on a zeroed buffer of length `n`, on the stack when it is small.
pub(crate) fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    const STACK: usize = 32;
    if n <= STACK {
        let mut buf = [0.0; STACK];
        f(&mut buf[..n])
    } else {
        f(&mut vec![0.0; n])
    }
}

/// A twice-differentiable objective `F: R^d -> R`.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    /// Row-major symmetric `d x d` Hessian.
    fn hessian(&self, x: &[f64], hess: &mut [f64]);

    /// True when the Hessian is the same at every point, i.e. `F` is quadratic.
    fn constant_hessian(&self) -> bool {
        false
    }
}

/// Objective assembled from three closures.
pub struct FnObjective<V, G, H> {
    pub dim: usize,
    pub value: V,
    pub gradient: G,
    pub hessian: H,
}

impl<V, G, H> Objective for FnObjective<V, G, H>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
    H: Fn(&[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        (self.gradient)(x, grad)
    }

    fn hessian(&self, x: &[f64], hess: &mut [f64]) {
        (self.hessian)(x, hess)
    }
}

/// Lower-triangular `L` with `L L^T = H`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    n: usize,
    l: MatBuf,
    log_det: f64,
}

pub fn cholesky(h: &[f64], n: usize) -> Result<CholeskyFactor> {
    check_dim(n * n, h.len())?;
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (h[i * n + j] - h[j * n + i]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let mut l: MatBuf = SmallVec::from_elem(0.0, n * n);
    for j in 0..n {
        let mut diag = h[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0 && diag.is_finite()) {
            return Err(Error::IndefiniteHessian);
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = h[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    let log_det = (0..n).map(|i| l[i * n + i].ln()).sum();
    Ok(CholeskyFactor { n, l, log_det })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Row-major lower factor.
    pub fn lower(&self) -> &[f64] {
        &self.l
    }

    /// Solves `L z = b` in place.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `L^T z = b` in place.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `H z = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    /// `log det L`.
    pub fn log_det_lower(&self) -> f64 {
        self.log_det
    }

    /// `L L^T` (row-major).
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = (0..=i.min(j)).map(|k| self.l[i * n + k] * self.l[j * n + k]).sum();
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x_min: Point,
    pub f_min: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Newton's method with Armijo backtracking. Steps where the Hessian is not
/// positive definite fall back to steepest descent.
///
/// Running out of iterations is reported through `converged = false`; a
/// non-finite objective or gradient at an accepted iterate is an error.
pub fn minimize(obj: &dyn Objective, x0: &[f64], grad_tol: f64, max_iter: usize) -> Result<MinimizeResult> {
    let d = obj.dim();
    check_dim(d, x0.len())?;
    if !(grad_tol > 0.0) {
        return Err(Error::InvalidConfig("grad_tol must be positive".into()));
    }
    with_scratch(4 * d + d * d, |buf| {
        let (x, rest) = buf.split_at_mut(d);
        let (g, rest) = rest.split_at_mut(d);
        let (p, rest) = rest.split_at_mut(d);
        let (trial, h) = rest.split_at_mut(d);
        x.copy_from_slice(x0);
        let mut f = obj.value(x);
        if !f.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        obj.gradient(x, g);
        let mut iterations = 0;

        loop {
            let gn = norm(g);
            if !gn.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            if gn <= grad_tol || iterations >= max_iter {
                return Ok(MinimizeResult {
                    x_min: SmallVec::from_slice(x),
                    f_min: f,
                    iterations,
                    converged: gn <= grad_tol,
                    grad_norm: gn,
                });
            }

            obj.hessian(x, h);
            p.copy_from_slice(g);
            if let Ok(factor) = cholesky(h, d) {
                factor.solve_in_place(p);
            }
            p.iter_mut().for_each(|v| *v = -*v);
            let mut slope = dot(g, p);
            if !(slope < 0.0) {
                p.iter_mut().zip(g.iter()).for_each(|(pi, gi)| *pi = -gi);
                slope = -gn * gn;
            }

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                trial.iter_mut().zip(x.iter()).zip(p.iter()).for_each(|((ti, xi), pi)| *ti = xi + t * pi);
                let ft = obj.value(trial);
                if ft.is_finite() && ft <= f + ARMIJO_C * t * slope {
                    accepted = Some(ft);
                    break;
                }
                t *= 0.5;
            }
            let Some(ft) = accepted else {
                // no decrease representable along the search direction
                return Ok(MinimizeResult {
                    x_min: SmallVec::from_slice(x),
                    f_min: f,
                    iterations,
                    converged: false,
                    grad_norm: gn,
                });
            };
            x.copy_from_slice(trial);
            f = ft;
            obj.gradient(x, g);
            iterations += 1;
        }
    })
}

/// Solution of `F(x) - f_min = |xi|^2 / 2 (+ offset)` along the random-map ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMapSolution {
    pub x: Point,
    pub lambda: f64,
    pub log_jacobian: f64,
    /// `F(x)`.
    pub value: f64,
}

const INITIAL_BRACKET: f64 = 10.0;
const LAMBDA_MAX: f64 = 1e6;
const ROOT_REL_TOL: f64 = 1e-13;
const ROOT_ACCEPT_TOL: f64 = 1e-10;
const ROOT_MAX_ITER: usize = 200;

/// Random map `x(lambda) = x_min + lambda L^{-T} xi / |xi|` with `lambda >= 0`
/// solving `F(x) - f_min = xi^T xi / 2`.
///
/// `factor` is the Cholesky factor of the Hessian of `F` at `x_min`. The
/// returned `log_jacobian` is `log |det dx/dxi|`.
pub fn solve_random_map(
    obj: &dyn Objective,
    x_min: &[f64],
    f_min: f64,
    factor: &CholeskyFactor,
    xi: &[f64],
) -> Result<RandomMapSolution> {
    solve_random_map_shifted(obj, x_min, f_min, factor, xi, 0.0)
}

/// As [`solve_random_map`] with the right-hand side raised by `offset >= 0`
/// (the perturbation in `gamma = min F + offset`).
pub fn solve_random_map_shifted(
    obj: &dyn Objective,
    x_min: &[f64],
    f_min: f64,
    factor: &CholeskyFactor,
    xi: &[f64],
    offset: f64,
) -> Result<RandomMapSolution> {
    let d = obj.dim();
    check_dim(d, x_min.len())?;
    check_dim(d, xi.len())?;
    check_dim(d, factor.dim())?;
    let log_det_inv = -factor.log_det_lower();
    let r = norm(xi);
    if r == 0.0 {
        // Gaussian limit: lambda ~ |xi| and dx/dxi -> L^{-T}
        return Ok(RandomMapSolution { x: SmallVec::from_slice(x_min), lambda: 0.0, log_jacobian: log_det_inv, value: f_min });
    }
    let target = 0.5 * r * r + offset.max(0.0);
    let tol = ROOT_REL_TOL * (1.0 + r * r);

    // u = L^{-T} xi / |xi|
    let mut u: Buf = xi.iter().map(|v| v / r).collect();
    factor.solve_upper_in_place(&mut u);

    let mut x: Buf = SmallVec::from_elem(0.0, d);
    let mut grad: Buf = SmallVec::from_elem(0.0, d);
    let residual = |lambda: f64, x: &mut [f64]| -> f64 {
        x.iter_mut().zip(x_min).zip(&u).for_each(|((xi, m), ui)| *xi = m + lambda * ui);
        obj.value(x) - f_min - target
    };

    // Safeguarded Newton on h(lambda) = F(x(lambda)) - f_min - target, started
    // at the quadratic-model root. `hi` stays open until a point with h > 0 is
    // seen; until then steps may at most double.
    let mut lo = 0.0;
    let mut hi: Option<f64> = None;
    let mut lambda = (2.0 * target).sqrt();
    let mut best = (f64::INFINITY, lambda, f64::NAN);
    let mut at = f64::NAN;
    for _ in 0..ROOT_MAX_ITER {
        let h = residual(lambda, &mut x);
        at = lambda;
        if h.is_nan() {
            return Err(Error::NonFiniteObjective);
        }
        if h.abs() < best.0 {
            best = (h.abs(), lambda, h);
        }
        if h.abs() <= tol {
            break;
        }
        if h < 0.0 {
            lo = lambda;
        } else {
            hi = Some(lambda);
        }
        if let Some(hi) = hi {
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
        }
        obj.gradient(&x, &mut grad);
        let slope = dot(&grad, &u);
        let newton = lambda - h / slope;
        let newton_ok = slope > 0.0 && newton.is_finite() && newton > lo;
        lambda = match hi {
            Some(hi) if newton_ok && newton < hi => newton,
            Some(hi) => 0.5 * (lo + hi),
            None => {
                let cap = (2.0 * lambda).max(INITIAL_BRACKET);
                let next = if newton_ok { newton.min(cap) } else { cap };
                if next > LAMBDA_MAX {
                    return Err(Error::UnboundedDirection);
                }
                next
            }
        };
    }
    let (res, lambda, h) = best;
    if res > ROOT_ACCEPT_TOL * (1.0 + r * r) {
        return Err(Error::RootSolve(res));
    }
    if at != lambda {
        let _ = residual(lambda, &mut x);
    }
    obj.gradient(&x, &mut grad);
    let slope = dot(&grad, &u);
    if !(slope > 0.0) {
        return Err(Error::RootSolve(res));
    }
    // z = L^T (x - x_min) = lambda(r) xi/r is radial, so
    // det dz/dxi = (lambda/r)^{d-1} dlambda/dr with dlambda/dr = r / h'(lambda).
    let log_jacobian = log_det_inv + (d as f64 - 1.0) * (lambda / r).ln() + (r / slope).ln();
    Ok(RandomMapSolution { x, lambda, log_jacobian, value: f_min + target + h })
}
