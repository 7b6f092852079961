//! Sample-wise mean shifts for outlying observations, and clean-then-refit.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HermitError, Result};
use crate::expfamily::FamilyKind;
use crate::model::{component_natural, Dataset, MixtureModel, ResponsibilityMatrix};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::solver::apg::{apg_minimize, ApgOptions, NormPenalty, SmoothFn};
use crate::solver::{self, Extensions, FitConfig, FitReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub lambda2: f64,
    #[serde(default)]
    pub base: FitConfig,
    #[serde(default)]
    pub p_clean: f64,
}

impl RobustConfig {
    pub fn new(lambda2: f64, base: FitConfig) -> Self {
        RobustConfig { lambda2, base, p_clean: 0.0 }
    }

    pub fn with_p_clean(mut self, p: f64) -> Self {
        self.p_clean = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2 >= 0.0) {
            return Err(HermitError::InvalidConfig(format!("lambda2 must be nonnegative, got {}", self.lambda2)));
        }
        if !(0.0..1.0).contains(&self.p_clean) {
            return Err(HermitError::InvalidConfig(format!("p_clean must lie in [0, 1), got {}", self.p_clean)));
        }
        self.base.validate()
    }
}

/// Joint fit of the mixture and per-sample mean shifts. The returned model
/// carries the shifts.
pub fn fit_robust(
    data: &Dataset,
    pen: &PenaltyConfig,
    rcfg: &RobustConfig,
) -> Result<(MixtureModel, ResponsibilityMatrix, FitReport)> {
    rcfg.validate()?;
    let ext = Extensions { mean_shift: Some(rcfg.lambda2), ..Default::default() };
    let out = solver::run(data, pen, &rcfg.base, &ext, None)?;
    Ok((out.model, out.rho, out.report))
}

/// Euclidean norm of each sample's shift slice.
pub fn outlier_scores(zeta: &Array3<f64>) -> Array1<f64> {
    zeta.outer_iter().map(|slice| slice.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    /// Plain fit on the retained samples.
    pub model: MixtureModel,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub scores: Array1<f64>,
    pub report: FitReport,
}

/// Fit with mean shifts, drop the `ceil(p_clean * n)` samples with the
/// largest shifts, then fit the plain model on the rest.
pub fn two_stage(data: &Dataset, pen: &PenaltyConfig, rcfg: &RobustConfig) -> Result<TwoStageResult> {
    let (stage1, _, report1) = fit_robust(data, pen, rcfg)?;
    let scores = outlier_scores(stage1.zeta().expect("robust fit carries shifts"));
    let n = data.n();
    let n_remove = ((rcfg.p_clean * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut removed = order[..n_remove].to_vec();
    removed.sort_unstable();
    let mut keep_mask = vec![true; n];
    for &i in &removed {
        keep_mask[i] = false;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| keep_mask[i]).collect();
    let cleaned = data.select_rows(&kept);
    let (model, _, mut report) = solver::fit(&cleaned, pen, &rcfg.base)?;
    report.warnings.extend(report1.warnings.into_iter().map(|w| format!("stage 1: {w}")));
    for (j, fam) in cleaned.tasks().iter().enumerate() {
        let vals: Vec<f64> =
            (0..cleaned.n()).filter(|&i| cleaned.observed()[[i, j]]).map(|i| cleaned.y()[[i, j]]).collect();
        if vals.is_empty() {
            report.warnings.push(format!("task {j} has no observations after cleaning"));
        } else if fam.kind() == FamilyKind::Bernoulli && vals.iter().all(|&v| v == vals[0]) {
            report.warnings.push(format!("task {j} has a single class after cleaning"));
        }
    }
    Ok(TwoStageResult { model, kept, removed, scores, report })
}

fn base_natural(data: &Dataset, beta: &Array3<f64>) -> Array3<f64> {
    let (_, m, k) = beta.dim();
    let mut base = Array3::zeros((data.n(), m, k));
    for r in 0..k {
        base.slice_mut(s![.., .., r]).assign(&component_natural(beta.index_axis(Axis(2), r), data.x().view()));
    }
    base
}

/// Shift loss with `z` flattened to `(n, m * k)`, task-major.
fn shift_loss(data: &Dataset, base: &Array3<f64>, rho: &Array2<f64>, z: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, m, k) = base.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::zeros((n, m * k));
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            if !data.observed()[[i, j]] {
                continue;
            }
            let fam = &data.tasks()[j];
            let y = data.y()[[i, j]];
            for r in 0..k {
                let w = rho[[i, r]] * inv_n;
                let eta = base[[i, j, r]] + z[[i, j * k + r]];
                total += w * fam.neg_loglik_kernel(y, eta);
                grad[[i, j * k + r]] = w * fam.grad_kernel(y, eta);
            }
        }
    }
    (total, grad)
}

/// The smooth term of the shift update: expected complete negative
/// log-likelihood over `n` as a function of `zeta` `(n, m, k)`, coefficients
/// and responsibilities fixed.
pub fn zeta_smooth_loss(
    data: &Dataset,
    beta: &Array3<f64>,
    rho: &ResponsibilityMatrix,
    zeta: &Array3<f64>,
) -> Result<(f64, Array3<f64>)> {
    let (d, m, k) = beta.dim();
    if d != data.d() || m != data.m() || rho.n() != data.n() || rho.k() != k || zeta.dim() != (data.n(), m, k) {
        return Err(HermitError::Dimension(format!(
            "beta {:?}, shifts {:?}, rho {}x{}",
            beta.dim(),
            zeta.dim(),
            rho.n(),
            rho.k()
        )));
    }
    let base = base_natural(data, beta);
    let flat = zeta.to_shape((data.n(), m * k)).expect("contiguous shifts").to_owned();
    let (v, g) = shift_loss(data, &base, rho.rho(), &flat);
    Ok((v, g.into_shape_with_order((data.n(), m, k)).expect("same element count")))
}

/// One proximal-gradient solve for the shifts with the coefficients fixed.
/// Returns the inner iteration count.
pub(crate) fn update_zeta(
    data: &Dataset,
    beta: &Array3<f64>,
    rho: &Array2<f64>,
    zeta: &mut Array3<f64>,
    lambda2: f64,
    opts: ApgOptions,
) -> Result<usize> {
    let (n, m, k) = zeta.dim();
    let base = base_natural(data, beta);
    let smooth = SmoothFn(|z: &Array2<f64>| shift_loss(data, &base, rho, z));
    let prox = NormPenalty { kind: PenaltyKind::RowGroup, weight: lambda2, exempt_row: None };
    let init = zeta.to_shape((n, m * k)).expect("contiguous shifts").to_owned();
    let out = apg_minimize(&smooth, &prox, &init, opts)?;
    zeta.assign(&out.x.to_shape((n, m, k)).expect("same element count"));
    Ok(out.iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfamily::Family;
    use crate::penalty::prox;
    use crate::util::rng_for;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn scores_of_simple_tensors() {
        assert!(outlier_scores(&Array3::zeros((4, 2, 3))).iter().all(|&v| v == 0.0));
        let mut z = Array3::zeros((3, 2, 2));
        z[[0, 0, 0]] = 3.0;
        assert_eq!(outlier_scores(&z).to_vec(), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn scores_match_loop_oracle() {
        let mut rng = rng_for(1, 0);
        let z = Array3::from_shape_fn((7, 3, 4), |_| rng.gen_range(-2.0..2.0));
        let got = outlier_scores(&z);
        for i in 0..7 {
            let mut s = 0.0;
            for j in 0..3 {
                for r in 0..4 {
                    s += z[[i, j, r]] * z[[i, j, r]];
                }
            }
            assert!((got[i] - s.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_prox_zeroes_small_slices_exactly() {
        let mut rng = rng_for(2, 0);
        let z = Array2::from_shape_fn((30, 6), |_| rng.gen_range(-1.0..1.0));
        let t = 1.2;
        let p = prox(z.view(), t, PenaltyKind::RowGroup).unwrap();
        for i in 0..30 {
            let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let zeroed = p.row(i).iter().all(|&v| v == 0.0);
            assert_eq!(zeroed, norm <= t, "row {i} norm {norm}");
        }
    }

    fn linear_data(seed: u64, n: usize, shifted: &[usize]) -> Dataset {
        let mut rng = rng_for(seed, 5);
        let mut x = Array2::ones((n, 2));
        let mut y = Array2::zeros((n, 1));
        for i in 0..n {
            x[[i, 1]] = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = 0.5 + 1.5 * x[[i, 1]] + 0.3 * e;
        }
        for &i in shifted {
            y[[i, 0]] += 100.0;
        }
        Dataset::from_nan_targets(x, y, vec![Family::gaussian()]).unwrap()
    }

    #[test]
    fn shifted_sample_gets_the_largest_score() {
        let data = linear_data(3, 40, &[17]);
        let rcfg = RobustConfig::new(0.5, FitConfig::with_k(1));
        let (model, _, report) = fit_robust(&data, &PenaltyConfig::lasso(0.0), &rcfg).unwrap();
        let scores = outlier_scores(model.zeta().unwrap());
        let top = (0..40).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(top, 17);
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn huge_shift_penalty_reproduces_plain_fit() {
        let data = linear_data(4, 50, &[]);
        let cfg = FitConfig::with_k(2).seed(3);
        let pen = PenaltyConfig::lasso(0.01);
        let (plain, _, _) = solver::fit(&data, &pen, &cfg).unwrap();
        let (rob, _, _) = fit_robust(&data, &pen, &RobustConfig::new(1e8, cfg)).unwrap();
        assert!(rob.zeta().unwrap().iter().all(|&v| v == 0.0));
        let diff = rob.beta() - plain.beta();
        assert!(diff.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn two_stage_removes_the_highest_scores() {
        let data = linear_data(5, 60, &[3, 40]);
        let rcfg = RobustConfig::new(0.5, FitConfig::with_k(1)).with_p_clean(2.0 / 60.0);
        let res = two_stage(&data, &PenaltyConfig::lasso(0.0), &rcfg).unwrap();
        assert_eq!(res.removed, vec![3, 40]);
        assert_eq!(res.kept.len(), 58);
        assert!((res.model.beta()[[1, 0, 0]] - 1.5).abs() < 0.2);
    }

    #[test]
    fn zero_cleaning_keeps_everything() {
        let data = linear_data(6, 30, &[]);
        let cfg = FitConfig::with_k(1);
        let res = two_stage(&data, &PenaltyConfig::lasso(0.0), &RobustConfig::new(1.0, cfg)).unwrap();
        assert!(res.removed.is_empty());
        let (plain, _, _) = solver::fit(&data, &PenaltyConfig::lasso(0.0), &cfg).unwrap();
        assert_eq!(res.model.beta(), plain.beta());
    }

    #[test]
    fn config_validation() {
        assert!(RobustConfig::new(-1.0, FitConfig::default()).validate().is_err());
        assert!(RobustConfig::new(1.0, FitConfig::default()).with_p_clean(1.0).validate().is_err());
        let c: RobustConfig = serde_json::from_str(r#"{"lambda2": 0.3, "p_clean": 0.05}"#).unwrap();
        assert_eq!(c.base.t_out, 50);
    }
}
