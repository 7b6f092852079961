//! Datasets with partially observed targets, mixture parameters, and the
//! quantities derived from them: natural parameters, the observed-data
//! log-likelihood, posterior responsibilities, hard assignments and
//! imputations.
//!
//! Coefficients are stored as a `(d, m, k)` tensor: `beta[[f, j, r]]` is the
//! weight of feature `f` for task `j` in component `r`. Mean shifts use the
//! `(n, m, k)` layout.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{HermitError, Result};
use crate::expfamily::{Family, FamilyKind};
use crate::util::{ordered_sum, softmax_rows};

/// Mixture weights are floored at this value when normalized.
pub const PI_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
    observed: Array2<bool>,
    tasks: Vec<Family>,
    base: Array2<f64>,
}

impl Dataset {
    /// Build a dataset. Unobserved entries of `y` are ignored (and stored as 0).
    pub fn new(x: Array2<f64>, y: Array2<f64>, observed: Array2<bool>, tasks: Vec<Family>) -> Result<Self> {
        let (n, _) = x.dim();
        let m = tasks.len();
        if y.dim() != (n, m) || observed.dim() != (n, m) {
            return Err(HermitError::Dimension(format!(
                "x has {n} rows and {m} tasks are declared, but y is {:?} and mask is {:?}",
                y.dim(),
                observed.dim()
            )));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(HermitError::InvalidData(format!("feature matrix contains {v}")));
        }
        let mut y = y;
        let mut base = Array2::zeros((n, m));
        for i in 0..n {
            if !observed.row(i).iter().any(|&o| o) {
                return Err(HermitError::InvalidData(format!("row {i} has no observed target")));
            }
            for j in 0..m {
                if observed[[i, j]] {
                    let v = y[[i, j]];
                    if !tasks[j].in_support(v) {
                        return Err(HermitError::InvalidData(format!(
                            "entry ({i},{j}) = {v} outside the {} support",
                            tasks[j].kind()
                        )));
                    }
                    base[[i, j]] = tasks[j].base_measure(v);
                } else {
                    y[[i, j]] = 0.0;
                }
            }
        }
        Ok(Dataset { x, y, observed, tasks, base })
    }

    /// Build a dataset where NaN marks a missing target.
    pub fn from_nan_targets(x: Array2<f64>, y: Array2<f64>, tasks: Vec<Family>) -> Result<Self> {
        let observed = y.mapv(|v| !v.is_nan());
        Self::new(x, y, observed, tasks)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.tasks.len()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Target matrix; unobserved positions hold 0.
    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    pub fn tasks(&self) -> &[Family] {
        &self.tasks
    }

    pub(crate) fn base(&self) -> &Array2<f64> {
        &self.base
    }

    /// Target matrix with NaN at unobserved positions.
    pub fn y_with_nan(&self) -> Array2<f64> {
        let mut y = self.y.clone();
        y.zip_mut_with(&self.observed, |v, &o| {
            if !o {
                *v = f64::NAN
            }
        });
        y
    }

    /// True when the first feature column is identically 1.
    pub fn has_intercept(&self) -> bool {
        self.d() > 0 && self.x.column(0).iter().all(|&v| v == 1.0)
    }

    pub fn n_observed(&self, task: usize) -> usize {
        self.observed.column(task).iter().filter(|&&o| o).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            observed: self.observed.select(Axis(0), rows),
            tasks: self.tasks.clone(),
            base: self.base.select(Axis(0), rows),
        }
    }

    /// Keep only the listed tasks; rows left without observed targets are
    /// dropped. Returns the new dataset and the retained row indices.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<(Dataset, Vec<usize>)> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.m()) {
            return Err(HermitError::Dimension(format!("task index {t} out of range")));
        }
        let rows: Vec<usize> = (0..self.n()).filter(|&i| tasks.iter().any(|&t| self.observed[[i, t]])).collect();
        if rows.is_empty() {
            return Err(HermitError::InvalidData("selected tasks are never observed".into()));
        }
        let ds = Dataset {
            x: self.x.select(Axis(0), &rows),
            y: self.y.select(Axis(0), &rows).select(Axis(1), tasks),
            observed: self.observed.select(Axis(0), &rows).select(Axis(1), tasks),
            tasks: tasks.iter().map(|&t| self.tasks[t]).collect(),
            base: self.base.select(Axis(0), &rows).select(Axis(1), tasks),
        };
        Ok((ds, rows))
    }

    /// Same data with a different observation mask. Positions newly marked
    /// observed must have been observed before.
    pub fn with_observed(&self, observed: Array2<bool>) -> Result<Dataset> {
        if observed.dim() != self.observed.dim() {
            return Err(HermitError::Dimension("mask shape differs from dataset".into()));
        }
        if observed.iter().zip(self.observed.iter()).any(|(&new, &old)| new && !old) {
            return Err(HermitError::InvalidData("cannot observe a previously missing entry".into()));
        }
        Dataset::new(self.x.clone(), self.y.clone(), observed, self.tasks.clone())
    }

    /// Replace target values (mask unchanged).
    pub fn with_targets(&self, y: Array2<f64>) -> Result<Dataset> {
        Dataset::new(self.x.clone(), y, self.observed.clone(), self.tasks.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    beta: Array3<f64>,
    pi: Array1<f64>,
    families: Vec<Family>,
    zeta: Option<Array3<f64>>,
    gamma: f64,
}

impl MixtureModel {
    pub fn new(beta: Array3<f64>, pi: Array1<f64>, families: Vec<Family>, gamma: f64) -> Result<Self> {
        let (_, m, k) = beta.dim();
        if families.len() != m {
            return Err(HermitError::Dimension(format!("beta has {m} tasks but {} families given", families.len())));
        }
        if pi.len() != k || k == 0 {
            return Err(HermitError::Dimension(format!("beta has {k} components but pi has {}", pi.len())));
        }
        if pi.iter().any(|&p| !(p > 0.0)) || (pi.sum() - 1.0).abs() > 1e-10 {
            return Err(HermitError::InvalidConfig(format!("pi is not a positive simplex vector: {pi}")));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(HermitError::NonFinite("coefficient tensor".into()));
        }
        Ok(MixtureModel { beta, pi, families, zeta: None, gamma })
    }

    /// Attach mean shifts with layout `(n, m, k)`.
    pub fn with_zeta(mut self, zeta: Array3<f64>) -> Result<Self> {
        let (_, m, k) = zeta.dim();
        if m != self.m() || k != self.k() {
            return Err(HermitError::Dimension(format!("zeta shape {:?} incompatible with model", zeta.dim())));
        }
        self.zeta = Some(zeta);
        Ok(self)
    }

    pub fn without_zeta(&self) -> Self {
        MixtureModel { zeta: None, ..self.clone() }
    }

    pub fn beta(&self) -> &Array3<f64> {
        &self.beta
    }

    pub fn pi(&self) -> &Array1<f64> {
        &self.pi
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn zeta(&self) -> Option<&Array3<f64>> {
        self.zeta.as_ref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d(&self) -> usize {
        self.beta.dim().0
    }

    pub fn m(&self) -> usize {
        self.beta.dim().1
    }

    pub fn k(&self) -> usize {
        self.beta.dim().2
    }

    /// Coefficient block of component `r` as a `d x m` matrix.
    pub fn component(&self, r: usize) -> ArrayView2<'_, f64> {
        self.beta.index_axis(Axis(2), r)
    }

    /// Reorder components: new component `r` is old component `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(HermitError::InvalidConfig("not a permutation".into()));
        }
        let beta = self.beta.select(Axis(2), perm);
        let pi = self.pi.select(Axis(0), perm);
        let zeta = self.zeta.as_ref().map(|z| z.select(Axis(2), perm));
        Ok(MixtureModel { beta, pi, families: self.families.clone(), zeta, gamma: self.gamma })
    }

    pub(crate) fn from_parts_unchecked(
        beta: Array3<f64>,
        pi: Array1<f64>,
        families: Vec<Family>,
        zeta: Option<Array3<f64>>,
        gamma: f64,
    ) -> Self {
        MixtureModel { beta, pi, families, zeta, gamma }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.d() {
            return Err(HermitError::Dimension(format!("data has {} features, model {}", data.d(), self.d())));
        }
        if data.m() != self.m() {
            return Err(HermitError::Dimension(format!("data has {} tasks, model {}", data.m(), self.m())));
        }
        if data.tasks().iter().zip(&self.families).any(|(a, b)| a.kind() != b.kind()) {
            return Err(HermitError::InvalidData("model families do not match dataset tasks".into()));
        }
        Ok(())
    }
}

/// Normalize nonnegative weights onto the simplex, flooring each entry at
/// [`PI_FLOOR`].
pub fn normalize_weights(w: ArrayView1<f64>) -> Array1<f64> {
    let total = ordered_sum(w.iter().copied());
    let mut p = if total > 0.0 { w.mapv(|v| v / total) } else { Array1::from_elem(w.len(), 1.0 / w.len() as f64) };
    p.mapv_inplace(|v| v.max(PI_FLOOR));
    let s = ordered_sum(p.iter().copied());
    p /= s;
    p
}

/// `n x k` posterior membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix {
    rho: Array2<f64>,
}

impl ResponsibilityMatrix {
    pub fn new(rho: Array2<f64>) -> Result<Self> {
        for (i, row) in rho.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-8 {
                return Err(HermitError::InvalidData(format!("row {i} is not a probability vector")));
            }
        }
        Ok(ResponsibilityMatrix { rho })
    }

    pub(crate) fn from_unchecked(rho: Array2<f64>) -> Self {
        ResponsibilityMatrix { rho }
    }

    pub fn rho(&self) -> &Array2<f64> {
        &self.rho
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.rho.nrows()
    }

    pub fn k(&self) -> usize {
        self.rho.ncols()
    }
}

/// Natural parameters of component `r` for the rows of `x` (`n x m`).
/// Zero coefficient rows are skipped in the product.
pub(crate) fn component_natural(beta_r: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let d = beta_r.nrows();
    let nz: Vec<usize> = (0..d).filter(|&f| beta_r.row(f).iter().any(|&v| v != 0.0)).collect();
    if nz.len() == d {
        x.dot(&beta_r)
    } else if nz.is_empty() {
        Array2::zeros((x.nrows(), beta_r.ncols()))
    } else {
        x.select(Axis(1), &nz).dot(&beta_r.select(Axis(0), &nz))
    }
}

fn check_zeta_rows(model: &MixtureModel, n: usize) -> Result<()> {
    if let Some(z) = model.zeta() {
        if z.dim().0 != n {
            return Err(HermitError::Dimension(format!(
                "mean shifts were fitted on {} samples, got {n}",
                z.dim().0
            )));
        }
    }
    Ok(())
}

/// Natural parameters `x_i . beta_jr + zeta_ijr` as an `(n, m, k)` tensor.
pub fn natural_params(model: &MixtureModel, x: ArrayView2<f64>) -> Result<Array3<f64>> {
    if x.ncols() != model.d() {
        return Err(HermitError::Dimension(format!("x has {} columns, model expects {}", x.ncols(), model.d())));
    }
    check_zeta_rows(model, x.nrows())?;
    let (n, m, k) = (x.nrows(), model.m(), model.k());
    let mut out = Array3::zeros((n, m, k));
    for r in 0..k {
        let mut eta = component_natural(model.component(r), x);
        if let Some(z) = model.zeta() {
            eta += &z.slice(s![.., .., r]);
        }
        out.slice_mut(s![.., .., r]).assign(&eta);
    }
    Ok(out)
}

/// `n x k` matrix of `sum_{j in Omega_i ∩ subset} log f(y_ij | eta_ijr)`.
pub(crate) fn component_log_densities(model: &MixtureModel, data: &Dataset, subset: Option<&[bool]>) -> Array2<f64> {
    let (n, m, k) = (data.n(), data.m(), model.k());
    let mut out = Array2::zeros((n, k));
    let y = data.y();
    let obs = data.observed();
    let base = data.base();
    for r in 0..k {
        let mut eta = component_natural(model.component(r), data.x().view());
        if let Some(z) = model.zeta() {
            eta += &z.slice(s![.., .., r]);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                if obs[[i, j]] && subset.map_or(true, |s| s[j]) {
                    acc += model.families()[j].log_density_with_base(y[[i, j]], eta[[i, j]], base[[i, j]]);
                }
            }
            out[[i, r]] = acc;
        }
    }
    out
}

/// Log-terms `log pi_r + sum_j log f` plus their row log-sum-exp.
pub(crate) fn log_terms(model: &MixtureModel, data: &Dataset, subset: Option<&[bool]>) -> Array2<f64> {
    let mut lt = component_log_densities(model, data, subset);
    let log_pi = model.pi().mapv(f64::ln);
    for mut row in lt.axis_iter_mut(Axis(0)) {
        row += &log_pi;
    }
    lt
}

/// Observed-data log-likelihood, computed with row-wise log-sum-exp.
pub fn log_likelihood(model: &MixtureModel, data: &Dataset) -> Result<f64> {
    model.check_data(data)?;
    check_zeta_rows(model, data.n())?;
    let lt = log_terms(model, data, None);
    let (_, lse) = softmax_rows(lt.view());
    Ok(lse.sum())
}

/// Posterior membership probabilities given the observed targets, optionally
/// restricted to a subset of tasks. Rows with no observed task in the subset
/// get the prior `pi`.
pub fn responsibilities(
    model: &MixtureModel,
    data: &Dataset,
    task_subset: Option<&[usize]>,
) -> Result<ResponsibilityMatrix> {
    model.check_data(data)?;
    check_zeta_rows(model, data.n())?;
    let mask = match task_subset {
        Some(ts) => {
            let mut mask = vec![false; data.m()];
            for &t in ts {
                if t >= data.m() {
                    return Err(HermitError::Dimension(format!("task index {t} out of range")));
                }
                mask[t] = true;
            }
            Some(mask)
        }
        None => None,
    };
    let lt = log_terms(model, data, mask.as_deref());
    let (rho, _) = softmax_rows(lt.view());
    Ok(ResponsibilityMatrix::from_unchecked(rho))
}

/// Bayes-rule hard assignment; ties go to the lowest component index.
pub fn cluster_assign(rho: &ResponsibilityMatrix) -> Vec<usize> {
    rho.rho()
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (r, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Fill unobserved targets with the posterior-weighted component means.
/// Mean shifts are ignored. Observed entries are returned unchanged.
pub fn impute(model: &MixtureModel, data: &Dataset) -> Result<Array2<f64>> {
    let plain = model.without_zeta();
    let rho = responsibilities(&plain, data, None)?;
    let mut out = data.y_with_nan();
    let means = component_means(&plain, data.x().view());
    for i in 0..data.n() {
        for j in 0..data.m() {
            if !data.observed()[[i, j]] {
                out[[i, j]] = (0..plain.k()).map(|r| rho.rho()[[i, r]] * means[[i, j, r]]).sum();
            }
        }
    }
    Ok(out)
}

/// Component-wise conditional means `b'(x_i beta_jr)` as `(n, m, k)`.
pub(crate) fn component_means(model: &MixtureModel, x: ArrayView2<f64>) -> Array3<f64> {
    let (n, m, k) = (x.nrows(), model.m(), model.k());
    let mut out = Array3::zeros((n, m, k));
    for r in 0..k {
        let eta = component_natural(model.component(r), x);
        for i in 0..n {
            for j in 0..m {
                out[[i, j, r]] = model.families()[j].mean_unchecked(eta[[i, j]]);
            }
        }
    }
    out
}

/// Feature-only prediction weighting components by `pi`.
pub fn predict_prior_mean(model: &MixtureModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.d() {
        return Err(HermitError::Dimension("feature count mismatch".into()));
    }
    let means = component_means(&model.without_zeta(), x);
    let mut out = Array2::zeros((x.nrows(), model.m()));
    for r in 0..model.k() {
        out.scaled_add(model.pi()[r], &means.index_axis(Axis(2), r));
    }
    Ok(out)
}

/// Whether targets of this family are scored by AUC rather than nMSE.
pub fn is_binary(f: &Family) -> bool {
    f.kind() == FamilyKind::Bernoulli
}
