//! Generalized EM for the penalized mixture estimator.

pub mod apg;
pub(crate) mod glm;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HermitError, Result};
use crate::model::{
    component_log_densities, log_likelihood, normalize_weights, Dataset, MixtureModel, ResponsibilityMatrix,
};
use crate::penalty::{self, block_norm, PenaltyConfig};
use crate::util::{max_abs, ordered_sum, rng_for, softmax_rows};

use apg::ApgOptions;
use glm::{m_step_beta, ActiveSet, MStepInput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub k: usize,
    pub t_out: usize,
    pub t_in: usize,
    pub tol_obj: f64,
    pub tol_param: f64,
    pub tol_inner: f64,
    pub seed: u64,
    pub use_active_set: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 2,
            t_out: 50,
            t_in: 200,
            tol_obj: 1e-6,
            tol_param: 1e-3,
            tol_inner: 1e-6,
            seed: 0,
            use_active_set: true,
        }
    }
}

impl FitConfig {
    pub fn with_k(k: usize) -> Self {
        FitConfig { k, ..Default::default() }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(HermitError::InvalidConfig("k must be at least 1".into()));
        }
        if self.t_out == 0 || self.t_in == 0 {
            return Err(HermitError::InvalidConfig("iteration limits must be positive".into()));
        }
        for (name, v) in [("tol_obj", self.tol_obj), ("tol_param", self.tol_param), ("tol_inner", self.tol_inner)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(HermitError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn apg(&self) -> ApgOptions {
        ApgOptions { max_iter: self.t_in, tol: self.tol_inner }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Penalized objective after initialization and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub n_outer: usize,
    pub converged: bool,
    pub inner_iterations: Vec<usize>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loglik: Option<f64>,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Extra knobs for [`fit_with_options`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Starting responsibilities (`n x k`) instead of a random assignment.
    /// Coefficients then start at exactly zero.
    pub init_rho: Option<Array2<f64>>,
    /// Keep the mixture weights at their uniform starting value.
    pub fixed_pi: bool,
}

/// `-loglik / n + penalty` for a model on a dataset.
pub fn objective(model: &MixtureModel, data: &Dataset, pen: &PenaltyConfig) -> Result<f64> {
    pen.validate()?;
    let pen = pen.resolve(data);
    let ll = log_likelihood(model, data)?;
    Ok(-ll / data.n() as f64 + penalty::value(model.beta(), model.pi().view(), &pen))
}

pub fn fit(data: &Dataset, pen: &PenaltyConfig, cfg: &FitConfig) -> Result<(MixtureModel, ResponsibilityMatrix, FitReport)> {
    fit_with_options(data, pen, cfg, &FitOptions::default())
}

pub fn fit_with_options(
    data: &Dataset,
    pen: &PenaltyConfig,
    cfg: &FitConfig,
    opts: &FitOptions,
) -> Result<(MixtureModel, ResponsibilityMatrix, FitReport)> {
    let ext = Extensions { fixed_pi: opts.fixed_pi, ..Default::default() };
    let out = run(data, pen, cfg, &ext, opts.init_rho.as_ref())?;
    Ok((out.model, out.rho, out.report))
}

/// Expected complete negative log-likelihood over `n`, as a function of the
/// coefficients with responsibilities (and optional mean shifts) held fixed.
/// This is the smooth term each M-step minimizes; the gradient has the
/// `(d, m, k)` shape of `beta`.
pub fn beta_smooth_loss(
    data: &Dataset,
    rho: &ResponsibilityMatrix,
    beta: &Array3<f64>,
    zeta: Option<&Array3<f64>>,
) -> Result<(f64, Array3<f64>)> {
    let (d, m, k) = beta.dim();
    if d != data.d() || m != data.m() || rho.n() != data.n() || rho.k() != k {
        return Err(HermitError::Dimension(format!(
            "beta {:?}, rho {}x{} against data {}x{} with {} tasks",
            beta.dim(),
            rho.n(),
            rho.k(),
            data.n(),
            data.d(),
            data.m()
        )));
    }
    if let Some(z) = zeta {
        if z.dim() != (data.n(), m, k) {
            return Err(HermitError::Dimension(format!("shifts {:?}", z.dim())));
        }
    }
    Ok(glm::smooth_value_grad(data, rho.rho(), beta, zeta))
}

/// Gate settings for the mixture-of-experts variant.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GateSpec {
    pub lambda2: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Extensions {
    /// Penalty strength of sample-wise mean shifts, if they are estimated.
    pub mean_shift: Option<f64>,
    pub gate: Option<GateSpec>,
    pub fixed_pi: bool,
}

pub(crate) struct EngineOutput {
    pub model: MixtureModel,
    pub alpha: Option<Array2<f64>>,
    pub rho: ResponsibilityMatrix,
    pub report: FitReport,
}

struct State {
    beta: Array3<f64>,
    pi: Array1<f64>,
    zeta: Option<Array3<f64>>,
    alpha: Option<Array2<f64>>,
}

impl State {
    fn model(&self, data: &Dataset, gamma: f64) -> MixtureModel {
        MixtureModel::from_parts_unchecked(
            self.beta.clone(),
            self.pi.clone(),
            data.tasks().to_vec(),
            self.zeta.clone(),
            gamma,
        )
    }

    fn max_change(&self, other: &State) -> f64 {
        fn rel<'a>(a: impl Iterator<Item = &'a f64> + Clone, b: impl Iterator<Item = &'a f64>) -> f64 {
            let scale = max_abs(a.clone()).max(1.0);
            a.zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
        }
        let mut c = rel(self.beta.iter(), other.beta.iter()).max(rel(self.pi.iter(), other.pi.iter()));
        if let (Some(a), Some(b)) = (&self.zeta, &other.zeta) {
            c = c.max(rel(a.iter(), b.iter()));
        }
        if let (Some(a), Some(b)) = (&self.alpha, &other.alpha) {
            c = c.max(rel(a.iter(), b.iter()));
        }
        c
    }
}

struct Evaluation {
    log_terms: Array2<f64>,
    nll: f64,
    objective: f64,
}

fn evaluate(state: &State, data: &Dataset, pen: &PenaltyConfig, ext: &Extensions) -> Result<Evaluation> {
    let model = state.model(data, pen.gamma);
    let mut lt = component_log_densities(&model, data, None);
    let mut extra = 0.0;
    match (&state.alpha, ext.gate) {
        (Some(alpha), Some(g)) => {
            lt += &crate::moe::log_gate(alpha, data.x());
            extra += g.lambda2 * crate::moe::alpha_norm(alpha, pen.exempt_row());
        }
        _ => {
            let log_pi = state.pi.mapv(f64::ln);
            for mut row in lt.axis_iter_mut(Axis(0)) {
                row += &log_pi;
            }
        }
    }
    if let (Some(z), Some(l2)) = (&state.zeta, ext.mean_shift) {
        extra += l2 * crate::robust::outlier_scores(z).sum();
    }
    let (_, lse) = softmax_rows(lt.view());
    let nll = -lse.sum() / data.n() as f64;
    let objective = nll + penalty::value(&state.beta, state.pi.view(), pen) + extra;
    if !objective.is_finite() {
        return Err(HermitError::NonFinite(format!("objective became {objective}")));
    }
    Ok(Evaluation { log_terms: lt, nll, objective })
}

/// Minimizer over the simplex of
/// `-(1/n) sum_r s_r log p_r + sum_r c_r p_r^gamma` for `gamma >= 1`, by
/// bisection on the multiplier of the sum constraint.
fn weighted_simplex_argmin(sums: &[f64], n: f64, coef: &[f64], gamma: f64) -> Array1<f64> {
    // Stationarity: s_r / (n p) = gamma c_r p^(gamma-1) + mu, whose left
    // side minus right side is decreasing in p.
    let root = |r: usize, mu: f64| -> f64 {
        if sums[r] <= 0.0 {
            return 0.0;
        }
        let excess = |p: f64| sums[r] / (n * p) - gamma * coef[r] * p.powf(gamma - 1.0) - mu;
        if excess(1.0) >= 0.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (-700.0f64, 0.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if excess(mid.exp()) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    };
    let total = |mu: f64| ordered_sum((0..sums.len()).map(|r| root(r, mu)));
    let mut hi = 1.0;
    let mut lo = -1.0 - gamma * coef.iter().cloned().fold(0.0, f64::max);
    while total(lo) < 1.0 {
        lo = 2.0 * lo - 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    Array1::from_iter((0..sums.len()).map(|r| root(r, mu)))
}

/// Mixture-weight step. The weight subproblem is solved exactly when it is
/// convex; otherwise the unpenalized closed form is used. Either proposal is
/// backtracked toward the current weights if it fails to decrease the
/// subproblem objective.
fn update_pi(pi: &Array1<f64>, rho: &Array2<f64>, beta: &Array3<f64>, pen: &PenaltyConfig) -> Array1<f64> {
    let n = rho.nrows() as f64;
    let sums = rho.sum_axis(Axis(0));
    let closed = normalize_weights(sums.view());
    if pen.lambda == 0.0 || pen.gamma == 0.0 {
        return closed;
    }
    let coef: Vec<f64> = (0..pi.len())
        .map(|r| pen.lambda * block_norm(beta.index_axis(Axis(2), r), pen.kind, pen.exempt_row()))
        .collect();
    let h = |p: &Array1<f64>| -> f64 {
        ordered_sum((0..p.len()).map(|r| -sums[r] * p[r].ln() / n + coef[r] * p[r].powf(pen.gamma)))
    };
    let proposal = if pen.gamma >= 1.0 {
        normalize_weights(weighted_simplex_argmin(sums.as_slice().unwrap(), n, &coef, pen.gamma).view())
    } else {
        closed
    };
    let h_old = h(pi);
    let mut t = 1.0;
    for _ in 0..40 {
        let cand = pi * (1.0 - t) + &proposal * t;
        if h(&cand) <= h_old {
            return cand;
        }
        t *= 0.5;
    }
    pi.clone()
}

pub(crate) fn run(
    data: &Dataset,
    pen: &PenaltyConfig,
    cfg: &FitConfig,
    ext: &Extensions,
    init_rho: Option<&Array2<f64>>,
) -> Result<EngineOutput> {
    cfg.validate()?;
    pen.validate()?;
    let (n, d, m, k) = (data.n(), data.d(), data.m(), cfg.k);
    let mut pen = pen.resolve(data);
    if ext.gate.is_some() {
        pen.gamma = 0.0;
    }
    let apg = cfg.apg();
    let mut rng = rng_for(cfg.seed, 0);

    let rho0 = match init_rho {
        Some(r) => {
            if r.dim() != (n, k) {
                return Err(HermitError::Dimension(format!("initial responsibilities {:?}, expected ({n}, {k})", r.dim())));
            }
            ResponsibilityMatrix::new(r.clone())?.into_inner()
        }
        None => {
            let mut r = Array2::zeros((n, k));
            for i in 0..n {
                r[[i, rng.gen_range(0..k)]] = 1.0;
            }
            r
        }
    };
    let beta = match init_rho {
        Some(_) => Array3::zeros((d, m, k)),
        None => {
            let jitter = Normal::new(0.0, 1e-5).expect("valid normal");
            Array3::from_shape_fn((d, m, k), |_| jitter.sample(&mut rng))
        }
    };
    let mut state = State {
        beta,
        pi: Array1::from_elem(k, 1.0 / k as f64),
        zeta: ext.mean_shift.map(|_| Array3::zeros((n, m, k))),
        alpha: ext.gate.map(|_| Array2::zeros((d, k))),
    };
    let mut report = FitReport::default();
    let mut active = ActiveSet::new(pen.kind, d, m, k, cfg.use_active_set);
    active.freeze_all(pen.exempt_row());

    let m_step = |state: &mut State, rho: &Array2<f64>, active: &mut ActiveSet, full_pass: bool| -> Result<usize> {
        let pi = state.pi.to_vec();
        let zeta = state.zeta.clone();
        let inp = MStepInput { data, rho: rho.view(), pi: &pi, pen: &pen, zeta: zeta.as_ref(), opts: apg, full_pass };
        let mut iters = m_step_beta(&inp, active, &mut state.beta)?;
        if let (Some(z), Some(l2)) = (state.zeta.as_mut(), ext.mean_shift) {
            iters += crate::robust::update_zeta(data, &state.beta, rho, z, l2, apg)?;
        }
        if let (Some(a), Some(g)) = (state.alpha.as_mut(), ext.gate) {
            if !g.frozen {
                iters += crate::moe::update_alpha(data.x(), rho, a, g.lambda2, pen.exempt_row(), apg)?;
            }
            state.pi = normalize_weights(crate::moe::gating_probs(a, data.x()).mean_axis(Axis(0)).unwrap().view());
        }
        Ok(iters)
    };

    let iters = m_step(&mut state, &rho0, &mut active, true)?;
    report.inner_iterations.push(iters);
    let mut eval = evaluate(&state, data, &pen, ext)?;
    report.objective_trace.push(eval.objective);

    let mut warned = vec![false; k];
    let mut force_full = false;
    let mut last_full = 0;
    for t in 1..=cfg.t_out {
        let (rho, _) = softmax_rows(eval.log_terms.view());
        let sums = rho.sum_axis(Axis(0));
        for r in 0..k {
            if sums[r] < 1e-8 * n as f64 && !warned[r] {
                warned[r] = true;
                report.warnings.push(format!("component {r} has vanishing responsibility at iteration {t}; weight floored"));
            }
        }
        let prev = State {
            beta: state.beta.clone(),
            pi: state.pi.clone(),
            zeta: state.zeta.clone(),
            alpha: state.alpha.clone(),
        };
        if !ext.fixed_pi && ext.gate.is_none() {
            state.pi = update_pi(&state.pi, &rho, &state.beta, &pen);
        }
        let full_pass = !cfg.use_active_set || force_full || t % 5 == 0 || t == cfg.t_out;
        let iters = m_step(&mut state, &rho, &mut active, full_pass)?;
        report.inner_iterations.push(iters);
        if full_pass {
            last_full = t;
        }
        let new_eval = evaluate(&state, data, &pen, ext)?;
        report.objective_trace.push(new_eval.objective);
        report.n_outer = t;
        let obj_change = (new_eval.nll - eval.nll).abs() / eval.nll.abs().max(1e-12);
        let param_change = state.max_change(&prev);
        eval = new_eval;
        if obj_change < cfg.tol_obj || param_change < cfg.tol_param {
            // Frozen units must pass a full optimality check before stopping.
            if last_full == t || !active.any_frozen() {
                report.converged = true;
                break;
            }
            force_full = true;
        } else {
            force_full = false;
        }
    }

    let (rho, _) = softmax_rows(eval.log_terms.view());
    let model = state.model(data, pen.gamma);
    Ok(EngineOutput { model, alpha: state.alpha, rho: ResponsibilityMatrix::from_unchecked(rho), report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfamily::Family;
    use crate::model::log_likelihood;
    use ndarray::{array, s};
    use rand_distr::StandardNormal;

    fn gaussian_data(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, 1);
        let mut x = Array2::ones((n, 3));
        let mut y = Array2::zeros((n, 1));
        for i in 0..n {
            x[[i, 1]] = StandardNormal.sample(&mut rng);
            x[[i, 2]] = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = 1.0 + 2.0 * x[[i, 1]] - x[[i, 2]] + 0.5 * e;
        }
        Dataset::from_nan_targets(x, y, vec![Family::gaussian()]).unwrap()
    }

    /// Normal equations solved by Gaussian elimination.
    fn ols(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let p = x.ncols();
        let mut a = x.t().dot(x);
        let mut b = x.t().dot(y);
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
            for cc in 0..p {
                a.swap([c, cc], [piv, cc]);
            }
            b.swap(c, piv);
            for r in c + 1..p {
                let f = a[[r, c]] / a[[c, c]];
                for cc in c..p {
                    a[[r, cc]] -= f * a[[c, cc]];
                }
                b[r] -= f * b[c];
            }
        }
        let mut out = Array1::zeros(p);
        for c in (0..p).rev() {
            let s: f64 = (c + 1..p).map(|cc| a[[c, cc]] * out[cc]).sum();
            out[c] = (b[c] - s) / a[[c, c]];
        }
        out
    }

    #[test]
    fn single_component_gaussian_is_least_squares() {
        let data = gaussian_data(80, 3);
        let cfg = FitConfig { t_in: 2000, tol_inner: 1e-12, ..FitConfig::with_k(1) };
        let (model, rho, report) = fit(&data, &PenaltyConfig::lasso(0.0), &cfg).unwrap();
        let expected = ols(data.x(), &data.y().column(0).to_owned());
        for f in 0..3 {
            assert!((model.beta()[[f, 0, 0]] - expected[f]).abs() < 1e-4, "{f}: {} vs {}", model.beta()[[f, 0, 0]], expected[f]);
        }
        assert!(rho.rho().iter().all(|&v| v == 1.0));
        assert!(report.converged);
    }

    #[test]
    fn objective_composes_loglik_and_penalty() {
        let data = gaussian_data(20, 1);
        let beta = Array3::from_shape_fn((3, 1, 2), |(f, _, r)| 0.3 * f as f64 - 0.2 * r as f64);
        let model = MixtureModel::new(beta, array![0.3, 0.7], vec![Family::gaussian()], 1.0).unwrap();
        let pen = PenaltyConfig::group(0.2);
        let got = objective(&model, &data, &pen).unwrap();
        let want = -log_likelihood(&model, &data).unwrap() / 20.0
            + penalty::value(model.beta(), model.pi().view(), &pen.resolve(&data));
        assert!((got - want).abs() < 1e-12);
        assert!((objective(&model, &data, &PenaltyConfig::lasso(0.0)).unwrap()
            + log_likelihood(&model, &data).unwrap() / 20.0)
            .abs()
            < 1e-15);
    }

    #[test]
    fn coin_flip_entropy() {
        let x = Array2::ones((4, 1));
        let y = array![[0.0], [1.0], [1.0], [0.0]];
        let data = Dataset::from_nan_targets(x, y, vec![Family::bernoulli()]).unwrap();
        let model = MixtureModel::new(Array3::zeros((1, 1, 1)), array![1.0], vec![Family::bernoulli()], 1.0).unwrap();
        let v = objective(&model, &data, &PenaltyConfig::lasso(1.0)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    fn toy_two_component(seed: u64) -> (Dataset, MixtureModel) {
        let mut rng = rng_for(seed, 2);
        let n = 30;
        let mut x = Array2::ones((n, 2));
        let mut y = Array2::zeros((n, 1));
        let truth = MixtureModel::new(
            array![[[2.0, -2.0]], [[1.0, -1.0]]],
            array![0.5, 0.5],
            vec![Family::gaussian()],
            1.0,
        )
        .unwrap();
        for i in 0..n {
            x[[i, 1]] = StandardNormal.sample(&mut rng);
            let r = rng.gen_range(0..2);
            let e: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = truth.beta()[[0, 0, r]] + truth.beta()[[1, 0, r]] * x[[i, 1]] + e;
        }
        (Dataset::from_nan_targets(x, y, vec![Family::gaussian()]).unwrap(), truth)
    }

    #[test]
    fn unpenalized_fit_beats_generating_parameters() {
        let (data, truth) = toy_two_component(5);
        let truth_ll = log_likelihood(&truth, &data).unwrap();
        let best = (0..5)
            .map(|s| {
                let cfg = FitConfig { t_out: 500, tol_obj: 1e-10, tol_param: 1e-8, ..FitConfig::with_k(2).seed(s) };
                let (m, _, _) = fit(&data, &PenaltyConfig::lasso(0.0), &cfg).unwrap();
                log_likelihood(&m, &data).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= truth_ll, "fitted {best} < truth {truth_ll}");
    }

    fn mixed_data(seed: u64, n: usize) -> Dataset {
        mixed_data_scaled(seed, n, 1.0)
    }

    fn mixed_data_scaled(seed: u64, n: usize, scale: f64) -> Dataset {
        let mut rng = rng_for(seed, 3);
        let d = 5;
        let x = Array2::from_shape_fn((n, d), |(_, f)| if f == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let mut y = Array2::zeros((n, 3));
        let mut obs = Array2::from_elem((n, 3), true);
        for i in 0..n {
            let g = rng.gen_range(0..2);
            let s = if g == 0 { 1.0 } else { -1.0 };
            let eta = scale * s * (x[[i, 1]] + 0.5 * x[[i, 2]]);
            let e: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = eta + e;
            y[[i, 1]] = if rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()) { 1.0 } else { 0.0 };
            let lam = (0.3 * eta).exp();
            let mut c = 0.0;
            let mut p = (-lam).exp();
            let mut acc = p;
            let u: f64 = rng.gen();
            while u > acc && c < 50.0 {
                c += 1.0;
                p *= lam / c;
                acc += p;
            }
            y[[i, 2]] = c;
            for j in 0..3 {
                if rng.gen::<f64>() < 0.15 {
                    obs[[i, j]] = false;
                    y[[i, j]] = 0.0;
                }
            }
            if !obs.row(i).iter().any(|&o| o) {
                obs[[i, 0]] = true;
            }
        }
        Dataset::new(x, y, obs, vec![Family::gaussian(), Family::bernoulli(), Family::poisson()]).unwrap()
    }

    #[test]
    fn objective_trace_is_monotone() {
        for seed in 0..50u64 {
            let data = mixed_data(seed, 60);
            let pen = if seed % 2 == 0 {
                PenaltyConfig::lasso(0.02 * (seed % 5) as f64)
            } else {
                PenaltyConfig::group(0.03).with_gamma((seed % 3) as f64 * 0.5)
            };
            let cfg = FitConfig { t_out: 30, ..FitConfig::with_k(1 + (seed as usize % 3)).seed(seed) };
            let (model, rho, report) = fit(&data, &pen, &cfg).unwrap();
            for w in report.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
            }
            assert!((model.pi().sum() - 1.0).abs() < 1e-10);
            assert_eq!(rho.n(), 60);
            let check = objective(&model, &data, &pen).unwrap();
            assert!((check - report.final_objective()).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_initial_responsibilities_permutes_fit() {
        let data = mixed_data(11, 80);
        let mut rng = rng_for(4, 4);
        let k = 3;
        let rho0 = Array2::from_shape_fn((80, k), |_| rng.gen::<f64>() + 0.1);
        let rho0 = &rho0 / &rho0.sum_axis(Axis(1)).insert_axis(Axis(1));
        let perm = [2usize, 0, 1];
        let rho_p = rho0.select(Axis(1), &perm);
        let pen = PenaltyConfig::lasso(0.01);
        let cfg = FitConfig::with_k(k).seed(9);
        let a = fit_with_options(&data, &pen, &cfg, &FitOptions { init_rho: Some(rho0), fixed_pi: false }).unwrap();
        let b = fit_with_options(&data, &pen, &cfg, &FitOptions { init_rho: Some(rho_p), fixed_pi: false }).unwrap();
        assert!((a.2.final_objective() - b.2.final_objective()).abs() < 1e-9);
        for (r, &p) in perm.iter().enumerate() {
            assert!((a.0.pi()[p] - b.0.pi()[r]).abs() < 1e-9);
            let diff = &a.0.beta().slice(s![.., .., p]) - &b.0.beta().slice(s![.., .., r]);
            assert!(max_abs(diff.iter()) < 1e-9, "component {r}: {}", max_abs(diff.iter()));
        }
    }

    #[test]
    fn active_set_does_not_change_the_answer() {
        for seed in 0..4u64 {
            let data = mixed_data_scaled(seed + 20, 150, 2.5);
            let pen = if seed % 2 == 0 { PenaltyConfig::lasso(0.05) } else { PenaltyConfig::group(0.05) };
            let base = FitConfig { t_out: 300, tol_obj: 1e-12, tol_param: 1e-7, tol_inner: 1e-8, t_in: 500, ..FitConfig::with_k(2).seed(seed) };
            let on = fit(&data, &pen, &base).unwrap();
            let off = fit(&data, &pen, &FitConfig { use_active_set: false, ..base }).unwrap();
            assert!(on.2.converged && off.2.converged);
            assert!(
                (on.2.final_objective() - off.2.final_objective()).abs() < 1e-6,
                "seed {seed}: {} vs {}",
                on.2.final_objective(),
                off.2.final_objective()
            );
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg: FitConfig = serde_json::from_str(r#"{"k": 4, "seed": 7}"#).unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.t_out, 50);
        assert_eq!(cfg.t_in, 200);
        assert!(cfg.use_active_set);
        let back: FitConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(FitConfig { k: 0, ..cfg }.validate().is_err());
        assert!(FitConfig { tol_obj: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn report_serializes_trace() {
        let data = gaussian_data(30, 2);
        let (_, _, report) = fit(&data, &PenaltyConfig::lasso(0.01), &FitConfig::with_k(2)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        assert_eq!(v["objective_trace"].as_array().unwrap().len(), report.objective_trace.len());
    }

    #[test]
    fn weighted_simplex_argmin_matches_grid_search() {
        let sums = [3.0, 1.0, 6.0];
        let coef = [0.5, 2.0, 0.1];
        for gamma in [1.0, 1.5, 2.0] {
            let p = weighted_simplex_argmin(&sums, 10.0, &coef, gamma);
            let h = |a: f64, b: f64| {
                let q = [a, b, 1.0 - a - b];
                (0..3).map(|r| -sums[r] * q[r].ln() / 10.0 + coef[r] * q[r].powf(gamma)).sum::<f64>()
            };
            let best = h(p[0], p[1]);
            let step = 1e-3;
            for i in 1..1000 {
                for j in 1..(1000 - i) {
                    assert!(h(i as f64 * step, j as f64 * step) >= best - 1e-12);
                }
            }
            assert!((p.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_update_never_worsens_weight_subproblem() {
        let rho = array![[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]];
        let beta = Array3::from_shape_fn((2, 1, 2), |(f, _, r)| if r == 0 { 5.0 * f as f64 } else { 0.1 });
        let pen = PenaltyConfig::lasso(2.0).with_exempt_intercept(true);
        let old = array![0.5, 0.5];
        let new = update_pi(&old, &rho, &beta, &pen);
        let h = |p: &Array1<f64>| {
            let s = rho.sum_axis(Axis(0));
            (0..2).map(|r| -s[r] * p[r].ln() / 3.0 + pen.weight(p[r]) * block_norm(beta.index_axis(Axis(2), r), pen.kind, Some(0))).sum::<f64>()
        };
        assert!(h(&new) <= h(&old));
        assert!((new.sum() - 1.0).abs() < 1e-12);
    }
}
