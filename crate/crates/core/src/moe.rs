//! Mixture of experts: mixture weights given by a multinomial logistic gate
//! on the features.

use ndarray::{Array2, Axis};

use crate::error::{HermitError, Result};
use crate::model::{component_log_densities, component_means, Dataset, MixtureModel, ResponsibilityMatrix};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::solver::apg::{apg_minimize, ApgOptions, NormPenalty, SmoothFn};
use crate::solver::{self, Extensions, FitConfig, FitReport, GateSpec};
use crate::util::softmax_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct GatingModel {
    /// `d x k` gate coefficients.
    pub alpha: Array2<f64>,
}

impl GatingModel {
    pub fn new(alpha: Array2<f64>) -> Result<Self> {
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(HermitError::NonFinite("gate coefficients".into()));
        }
        Ok(GatingModel { alpha })
    }

    pub fn k(&self) -> usize {
        self.alpha.ncols()
    }
}

/// Row-wise softmax of `x alpha`.
pub fn gating_probs(alpha: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    softmax_rows(x.dot(alpha).view()).0
}

/// Row-wise log-softmax of `x alpha`.
pub(crate) fn log_gate(alpha: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut logits = x.dot(alpha);
    let (_, lse) = softmax_rows(logits.view());
    for (mut row, l) in logits.axis_iter_mut(Axis(0)).zip(lse.iter()) {
        row -= *l;
    }
    logits
}

pub(crate) fn alpha_norm(alpha: &Array2<f64>, exempt: Option<usize>) -> f64 {
    crate::penalty::block_norm(alpha.view(), PenaltyKind::Entrywise, exempt)
}

/// `-(1/n) sum_i sum_r rho_ir log softmax(x_i alpha)_r` and its gradient
/// `(1/n) x^T (softmax(x alpha) - rho)`.
pub fn gate_loss(x: &Array2<f64>, rho: &Array2<f64>, alpha: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = x.nrows() as f64;
    let lg = log_gate(alpha, x);
    let value = -(&lg * rho).sum() / n;
    let resid = lg.mapv(f64::exp) - rho;
    (value, x.t().dot(&resid) / n)
}

pub(crate) fn update_alpha(
    x: &Array2<f64>,
    rho: &Array2<f64>,
    alpha: &mut Array2<f64>,
    lambda2: f64,
    exempt: Option<usize>,
    opts: ApgOptions,
) -> Result<usize> {
    let smooth = SmoothFn(|a: &Array2<f64>| gate_loss(x, rho, a));
    let prox = NormPenalty { kind: PenaltyKind::Entrywise, weight: lambda2, exempt_row: exempt };
    let out = apg_minimize(&smooth, &prox, alpha, opts)?;
    *alpha = out.x;
    Ok(out.iterations)
}

#[derive(Debug, Clone)]
pub struct MoeFit {
    /// Experts; `pi` holds the column means of the gate on the training data.
    pub model: MixtureModel,
    pub gate: GatingModel,
    pub rho: ResponsibilityMatrix,
    pub report: FitReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MoeOptions {
    /// Keep the gate at zero, so every sample gets uniform weights.
    pub freeze_gate: bool,
}

/// Fit experts and gate. The expert penalty uses no weight exponent; the
/// gate gets an entrywise penalty `lambda2` with the intercept row exempt.
pub fn fit_moe(data: &Dataset, pen_beta: &PenaltyConfig, lambda2: f64, cfg: &FitConfig) -> Result<MoeFit> {
    fit_moe_with(data, pen_beta, lambda2, cfg, MoeOptions::default())
}

pub fn fit_moe_with(
    data: &Dataset,
    pen_beta: &PenaltyConfig,
    lambda2: f64,
    cfg: &FitConfig,
    opts: MoeOptions,
) -> Result<MoeFit> {
    if !(lambda2 >= 0.0) {
        return Err(HermitError::InvalidConfig(format!("lambda2 must be nonnegative, got {lambda2}")));
    }
    let ext = Extensions { gate: Some(GateSpec { lambda2, frozen: opts.freeze_gate }), ..Default::default() };
    let out = solver::run(data, pen_beta, cfg, &ext, None)?;
    let gate = GatingModel { alpha: out.alpha.expect("gate present") };
    Ok(MoeFit { model: out.model, gate, rho: out.rho, report: out.report })
}

fn check(model: &MixtureModel, gate: &GatingModel, d: usize) -> Result<()> {
    if gate.alpha.dim() != (model.d(), model.k()) || d != model.d() {
        return Err(HermitError::Dimension(format!(
            "gate {:?} / features {d} do not match experts ({}, {})",
            gate.alpha.dim(),
            model.d(),
            model.k()
        )));
    }
    Ok(())
}

fn gated_log_terms(model: &MixtureModel, gate: &GatingModel, data: &Dataset) -> Result<Array2<f64>> {
    check(model, gate, data.d())?;
    let plain = model.without_zeta();
    if data.m() != model.m() {
        return Err(HermitError::Dimension("task count mismatch".into()));
    }
    Ok(component_log_densities(&plain, data, None) + log_gate(&gate.alpha, data.x()))
}

/// Observed-data log-likelihood with per-sample gate weights.
pub fn moe_log_likelihood(model: &MixtureModel, gate: &GatingModel, data: &Dataset) -> Result<f64> {
    let lt = gated_log_terms(model, gate, data)?;
    Ok(softmax_rows(lt.view()).1.sum())
}

/// Posterior membership probabilities with the gate as prior.
pub fn moe_responsibilities(model: &MixtureModel, gate: &GatingModel, data: &Dataset) -> Result<ResponsibilityMatrix> {
    let lt = gated_log_terms(model, gate, data)?;
    Ok(ResponsibilityMatrix::from_unchecked(softmax_rows(lt.view()).0))
}

/// Feature-only prediction: gate-weighted expert means.
pub fn predict_moe(model: &MixtureModel, gate: &GatingModel, x_new: &Array2<f64>) -> Result<Array2<f64>> {
    check(model, gate, x_new.ncols())?;
    let g = gating_probs(&gate.alpha, x_new);
    let means = component_means(&model.without_zeta(), x_new.view());
    let mut out = Array2::zeros((x_new.nrows(), model.m()));
    for r in 0..model.k() {
        let w = g.column(r).insert_axis(Axis(1));
        out += &(&means.index_axis(Axis(2), r) * &w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfamily::Family;
    use crate::solver::{fit_with_options, FitOptions};
    use crate::util::rng_for;
    use ndarray::{array, Array1, Array3};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_matrix(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = rng_for(seed, 0);
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_gate_is_uniform() {
        let g = gating_probs(&Array2::zeros((3, 4)), &rand_matrix(1, 5, 3));
        assert!(g.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn balanced_logits_split_evenly() {
        let alpha = array![[1.0, 2.0], [0.5, 0.0]];
        let x = array![[1.0, 2.0]];
        let g = gating_probs(&alpha, &x);
        assert!((g[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let alpha = rand_matrix(2, 3, 4);
        let x = rand_matrix(3, 6, 3);
        let c = array![0.7, -1.2, 3.0];
        let mut shifted = alpha.clone();
        for mut col in shifted.axis_iter_mut(Axis(1)) {
            col += &c;
        }
        let diff = gating_probs(&alpha, &x) - gating_probs(&shifted, &x);
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let x = rand_matrix(4, 12, 3);
        let mut rho = rand_matrix(5, 12, 3).mapv(f64::exp);
        let s = rho.sum_axis(Axis(1)).insert_axis(Axis(1));
        rho /= &s;
        let alpha = rand_matrix(6, 3, 3) * 0.5;
        let (_, g) = gate_loss(&x, &rho, &alpha);
        let h = 1e-6;
        for f in 0..3 {
            for r in 0..3 {
                let mut p = alpha.clone();
                p[[f, r]] += h;
                let mut q = alpha.clone();
                q[[f, r]] -= h;
                let fd = (gate_loss(&x, &rho, &p).0 - gate_loss(&x, &rho, &q).0) / (2.0 * h);
                assert!((fd - g[[f, r]]).abs() / g[[f, r]].abs().max(1e-3) < 1e-5);
            }
        }
    }

    fn experts(seed: u64) -> (MixtureModel, GatingModel, Dataset) {
        let mut rng = rng_for(seed, 1);
        let (n, d, m, k) = (25, 3, 2, 3);
        let beta = Array3::from_shape_fn((d, m, k), |_| rng.gen_range(-1.0..1.0));
        let model = MixtureModel::new(beta, Array1::from_elem(k, 1.0 / 3.0), vec![Family::gaussian(), Family::bernoulli()], 0.0)
            .unwrap();
        let gate = GatingModel::new(rand_matrix(seed + 10, d, k)).unwrap();
        let x = rand_matrix(seed + 20, n, d);
        let y = Array2::from_shape_fn((n, m), |(i, j)| if j == 0 { x[[i, 0]] } else { (i % 2) as f64 });
        (model, gate, Dataset::from_nan_targets(x, y, vec![Family::gaussian(), Family::bernoulli()]).unwrap())
    }

    #[test]
    fn gated_likelihood_matches_direct_density_sum() {
        let (model, gate, data) = experts(1);
        let g = gating_probs(&gate.alpha, data.x());
        let mut oracle = 0.0;
        for i in 0..data.n() {
            let mut mix = 0.0;
            for r in 0..3 {
                let mut dens = 1.0;
                for j in 0..2 {
                    let eta: f64 = (0..3).map(|f| data.x()[[i, f]] * model.beta()[[f, j, r]]).sum();
                    dens *= data.tasks()[j].log_density(data.y()[[i, j]], eta).unwrap().exp();
                }
                mix += g[[i, r]] * dens;
            }
            oracle += mix.ln();
        }
        assert!((moe_log_likelihood(&model, &gate, &data).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn prediction_matches_weighted_sum() {
        let (model, gate, data) = experts(2);
        let pred = predict_moe(&model, &gate, data.x()).unwrap();
        let g = gating_probs(&gate.alpha, data.x());
        for i in 0..data.n() {
            for j in 0..2 {
                let mut want = 0.0;
                for r in 0..3 {
                    let eta: f64 = (0..3).map(|f| data.x()[[i, f]] * model.beta()[[f, j, r]]).sum();
                    want += g[[i, r]] * data.tasks()[j].mean(eta).unwrap();
                }
                assert!((pred[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_experts_ignore_the_gate() {
        let (model, _, data) = experts(3);
        let one = model.component(0).to_owned();
        let beta = Array3::from_shape_fn((3, 2, 3), |(f, j, _)| one[[f, j]]);
        let same = MixtureModel::new(beta, model.pi().clone(), model.families().to_vec(), 0.0).unwrap();
        let a = predict_moe(&same, &GatingModel::new(rand_matrix(7, 3, 3)).unwrap(), data.x()).unwrap();
        let b = predict_moe(&same, &GatingModel::new(Array2::zeros((3, 3))).unwrap(), data.x()).unwrap();
        assert!((a - b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_gate_matches_fixed_uniform_weights() {
        let (_, _, data) = experts(4);
        let cfg = FitConfig::with_k(2).seed(5);
        let pen = PenaltyConfig::lasso(0.02).with_gamma(0.0);
        let moe = fit_moe_with(&data, &pen, 0.1, &cfg, MoeOptions { freeze_gate: true }).unwrap();
        let (plain, _, report) =
            fit_with_options(&data, &pen, &cfg, &FitOptions { init_rho: None, fixed_pi: true }).unwrap();
        assert!((moe.report.final_objective() - report.final_objective()).abs() < 1e-9);
        assert!((moe.model.beta() - plain.beta()).iter().all(|v| v.abs() < 1e-9));
        assert!(moe.gate.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moe_objective_is_monotone() {
        for seed in 0..6 {
            let (_, _, data) = experts(seed + 10);
            let res = fit_moe(&data, &PenaltyConfig::group(0.01), 0.01, &FitConfig::with_k(2).seed(seed)).unwrap();
            for w in res.report.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
            }
            assert!((res.model.pi().sum() - 1.0).abs() < 1e-10);
        }
    }
}
