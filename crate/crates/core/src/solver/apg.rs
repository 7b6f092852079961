//! Monotone accelerated proximal gradient with Barzilai-Borwein step
//! initialization and backtracking.

use ndarray::Array2;

use crate::error::{HermitError, Result};
use crate::penalty::{prox_exempt, PenaltyKind};

/// Smooth convex part of a composite objective.
pub trait SmoothObjective {
    fn value(&self, x: &Array2<f64>) -> f64;
    fn value_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>);
}

/// Nonsmooth part with a cheap proximal map.
pub trait ProxTerm {
    fn value(&self, x: &Array2<f64>) -> f64;
    /// `argmin_b 1/2 ||b - z||^2 + step * value(b)`.
    fn prox(&self, z: &Array2<f64>, step: f64) -> Array2<f64>;
}

/// Closure adapter: the closure returns value and gradient.
pub struct SmoothFn<F>(pub F);

impl<F: Fn(&Array2<f64>) -> (f64, Array2<f64>)> SmoothObjective for SmoothFn<F> {
    fn value(&self, x: &Array2<f64>) -> f64 {
        (self.0)(x).0
    }
    fn value_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>) {
        (self.0)(x)
    }
}

/// `weight * ||.||` with one optional unpenalized row.
#[derive(Debug, Clone, Copy)]
pub struct NormPenalty {
    pub kind: PenaltyKind,
    pub weight: f64,
    pub exempt_row: Option<usize>,
}

impl ProxTerm for NormPenalty {
    fn value(&self, x: &Array2<f64>) -> f64 {
        if self.weight == 0.0 {
            return 0.0;
        }
        self.weight * crate::penalty::block_norm(x.view(), self.kind, self.exempt_row)
    }

    fn prox(&self, z: &Array2<f64>, step: f64) -> Array2<f64> {
        prox_exempt(z.view(), step * self.weight, self.kind, self.exempt_row)
    }
}

/// No penalty: the prox is the identity.
pub struct Unpenalized;

impl ProxTerm for Unpenalized {
    fn value(&self, _x: &Array2<f64>) -> f64 {
        0.0
    }
    fn prox(&self, z: &Array2<f64>, _step: f64) -> Array2<f64> {
        z.clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ApgOptions {
    pub max_iter: usize,
    /// Stop when `||x_t - x_{t-1}|| <= tol * max(||x_{t-1}||, tiny)`.
    pub tol: f64,
}

impl Default for ApgOptions {
    fn default() -> Self {
        ApgOptions { max_iter: 200, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ApgResult {
    pub x: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

const STEP_GROWTH: f64 = 1.1;
const MIN_STEP: f64 = 1e-30;

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn sq_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn check_finite(g: &Array2<f64>, what: &str) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HermitError::NonFinite(format!("{what} has non-finite entries")))
    }
}

/// Barzilai-Borwein step from a short probe along the negative gradient.
fn bb_step<F: SmoothObjective>(f: &F, x: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let gnorm = sq_norm(g).sqrt();
    if gnorm == 0.0 {
        return 1.0;
    }
    let scale = 1e-4 * sq_norm(x).sqrt().max(1.0) / gnorm;
    let s = g.mapv(|v| -scale * v);
    let (_, g1) = f.value_grad(&(x + &s));
    let dg = &g1 - g;
    let curv = dot(&s, &dg);
    let step = sq_norm(&s) / curv;
    if step.is_finite() && step > 0.0 {
        step
    } else {
        1.0
    }
}

/// Minimize `f(x) + g(x)` from `init`.
///
/// The accepted iterate never increases the composite objective (monotone
/// FISTA), so the result is at least as good as `init`.
pub fn apg_minimize<F: SmoothObjective, G: ProxTerm>(
    f: &F,
    g: &G,
    init: &Array2<f64>,
    opts: ApgOptions,
) -> Result<ApgResult> {
    let mut x = init.clone();
    let (fx0, gx0) = f.value_grad(&x);
    check_finite(&gx0, "gradient")?;
    if !fx0.is_finite() {
        return Err(HermitError::NonFinite("objective at initial point".into()));
    }
    let mut obj_x = fx0 + g.value(&x);
    let mut step = bb_step(f, &x, &gx0);
    let mut y = x.clone();
    let mut x_prev = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut cached: Option<(f64, Array2<f64>)> = Some((fx0, gx0));

    while iterations < opts.max_iter {
        iterations += 1;
        let (fy, gy) = match cached.take() {
            Some(v) => v,
            None => f.value_grad(&y),
        };
        check_finite(&gy, "gradient")?;
        let (z, fz) = loop {
            let z = g.prox(&(&y - &(step * &gy)), step);
            let fz = f.value(&z);
            let dz = &z - &y;
            let bound = fy + dot(&gy, &dz) + sq_norm(&dz) / (2.0 * step);
            if fz.is_finite() && fz <= bound + 1e-12 * fy.abs().max(1.0) {
                break (z, fz);
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Err(HermitError::NonFinite("step size underflow in backtracking".into()));
            }
        };
        let obj_z = fz + g.value(&z);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let prev_norm = sq_norm(&x).sqrt();
        std::mem::swap(&mut x_prev, &mut x);
        let accepted = obj_z <= obj_x;
        if accepted {
            x = z.clone();
            obj_x = obj_z;
        } else {
            x = x_prev.clone();
        }
        // y = x + (t/t')(z - x) + ((t-1)/t')(x - x_prev)
        y = &x + &((t / t_next) * (&z - &x)) + &(((t - 1.0) / t_next) * (&x - &x_prev));
        if !accepted {
            // Restart momentum from the kept point.
            t = 1.0;
            y = x.clone();
            cached = None;
        } else {
            t = t_next;
        }
        step *= STEP_GROWTH;

        let change = sq_norm(&(&z - &x_prev)).sqrt();
        if change <= opts.tol * prev_norm.max(1e-12) {
            converged = true;
            break;
        }
    }
    Ok(ApgResult { x, objective: obj_x, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::util::rng_for;

    #[test]
    fn quadratic_converges_to_center() {
        let c = array![[1.0, -2.0], [0.5, 3.0]];
        let f = SmoothFn(|b: &Array2<f64>| {
            let d = b - &c;
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        });
        let out = apg_minimize(&f, &Unpenalized, &Array2::zeros((2, 2)), ApgOptions { max_iter: 500, tol: 1e-10 }).unwrap();
        for (a, b) in out.x.iter().zip(c.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn one_dimensional_lasso() {
        let f = SmoothFn(|b: &Array2<f64>| {
            let d = b[[0, 0]] - 2.0;
            (0.5 * d * d, array![[d]])
        });
        let g = NormPenalty { kind: PenaltyKind::Entrywise, weight: 0.5, exempt_row: None };
        let out = apg_minimize(&f, &g, &array![[0.0]], ApgOptions { max_iter: 500, tol: 1e-12 }).unwrap();
        assert_abs_diff_eq!(out.x[[0, 0]], 1.5, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let f = SmoothFn(|_b: &Array2<f64>| (0.0, array![[f64::NAN]]));
        assert!(apg_minimize(&f, &Unpenalized, &array![[0.0]], ApgOptions::default()).is_err());
    }

    /// Cyclic coordinate descent on 1/(2n)||y - A b||^2 + lam ||b||_1.
    fn coordinate_descent(a: &Array2<f64>, y: &Array1<f64>, lam: f64) -> Array1<f64> {
        let (n, p) = a.dim();
        let mut b = Array1::<f64>::zeros(p);
        let mut resid = y.clone();
        let col_sq: Vec<f64> = (0..p).map(|j| a.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64).collect();
        for _ in 0..20000 {
            let mut max_delta = 0.0f64;
            for j in 0..p {
                let rho = a.column(j).dot(&resid) / n as f64 + col_sq[j] * b[j];
                let new = crate::penalty::soft_threshold(rho, lam) / col_sq[j];
                let delta = new - b[j];
                if delta != 0.0 {
                    resid.scaled_add(-delta, &a.column(j));
                    b[j] = new;
                }
                max_delta = max_delta.max(delta.abs());
            }
            if max_delta < 1e-14 {
                break;
            }
        }
        b
    }

    #[test]
    fn lasso_matches_coordinate_descent() {
        let mut rng = rng_for(2024, 0);
        let (n, p) = (60, 20);
        let a = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
        let truth = Array1::from_shape_fn(p, |j| if j < 5 { rng.gen_range(1.0..2.0) } else { 0.0 });
        let noise = Array1::from_shape_fn(n, |_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let y = a.dot(&truth) + noise;
        let lam = 0.1;
        let obj = |b: &Array1<f64>| {
            let r = &y - &a.dot(b);
            r.dot(&r) / (2.0 * n as f64) + lam * b.iter().map(|v| v.abs()).sum::<f64>()
        };
        let oracle = coordinate_descent(&a, &y, lam);

        let f = SmoothFn(|b: &Array2<f64>| {
            let bv = b.column(0).to_owned();
            let r = a.dot(&bv) - &y;
            let g = a.t().dot(&r) / n as f64;
            (r.dot(&r) / (2.0 * n as f64), g.insert_axis(ndarray::Axis(1)))
        });
        let g = NormPenalty { kind: PenaltyKind::Entrywise, weight: lam, exempt_row: None };
        let out = apg_minimize(&f, &g, &Array2::zeros((p, 1)), ApgOptions { max_iter: 5000, tol: 1e-12 }).unwrap();
        let got = out.x.column(0).to_owned();
        assert!((obj(&got) - obj(&oracle)).abs() < 1e-6, "apg {} cd {}", obj(&got), obj(&oracle));
    }

    #[test]
    fn never_worse_than_init() {
        let mut rng = rng_for(5, 5);
        for _ in 0..20 {
            let c = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let init = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let f = SmoothFn(|b: &Array2<f64>| {
                let d = b - &c;
                (2.0 * d.iter().map(|v| v.powi(4)).sum::<f64>(), d.mapv(|v| 8.0 * v.powi(3)))
            });
            let g = NormPenalty { kind: PenaltyKind::RowGroup, weight: 0.7, exempt_row: Some(0) };
            let start = f.value(&init) + g.value(&init);
            let out = apg_minimize(&f, &g, &init, ApgOptions { max_iter: 7, tol: 1e-9 }).unwrap();
            assert!(out.objective <= start);
        }
    }
}
