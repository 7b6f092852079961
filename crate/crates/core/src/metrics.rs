//! Evaluation metrics: soft NMI, rank AUC, nMSE / aAUC over masked targets,
//! and component matching for feature-selection scoring.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{HermitError, Result};
use crate::expfamily::{Family, FamilyKind};

fn check_simplex(p: ArrayView2<f64>, name: &str) -> Result<()> {
    for (i, row) in p.axis_iter(Axis(0)).enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|&v| !(v >= -1e-12)) || (s - 1.0).abs() > 1e-6 {
            return Err(HermitError::InvalidData(format!("row {i} of {name} is not a probability vector")));
        }
    }
    Ok(())
}

/// Mutual information of the soft joint `(1/n) P^T Q` against its marginals.
pub(crate) fn soft_mi(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let n = p.nrows() as f64;
    let joint = p.t().dot(&q) / n;
    let pm = p.mean_axis(Axis(0)).unwrap();
    let qm = q.mean_axis(Axis(0)).unwrap();
    let mut mi = 0.0;
    for a in 0..joint.nrows() {
        for b in 0..joint.ncols() {
            let j = joint[[a, b]];
            if j > 0.0 {
                mi += j * (j / (pm[a] * qm[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Normalized mutual information between two soft partitions of the same
/// samples (`n x k` and `n x k'`, rows on the simplex). Joint and marginal
/// cluster probabilities are averaged over samples. Returns 0 when either
/// partition carries no information.
pub fn nmi(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    if p.nrows() != q.nrows() {
        return Err(HermitError::Dimension(format!("{} vs {} samples", p.nrows(), q.nrows())));
    }
    if p.nrows() == 0 {
        return Err(HermitError::InvalidData("no samples".into()));
    }
    check_simplex(p, "P")?;
    check_simplex(q, "Q")?;
    let denom = (soft_mi(p, p) * soft_mi(q, q)).sqrt();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok(soft_mi(p, q) / denom)
}

/// One-hot `n x k` matrix from hard labels.
pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// Wilcoxon-Mann-Whitney AUC with ties counted as one half. `None` when a
/// class is absent.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (doubled) midranks of the positives, kept integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum2 += doubled_mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank_sum2 - np * (np + 1);
    Some(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

fn transform(fam: &Family, v: f64) -> f64 {
    if fam.kind() == FamilyKind::Poisson {
        v.max(0.0).ln_1p()
    } else {
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskScores {
    /// Mean nMSE over Gaussian and Poisson tasks that could be scored.
    pub nmse: Option<f64>,
    /// Mean AUC over Bernoulli tasks with both classes present.
    pub aauc: Option<f64>,
    /// Per-task nMSE (Gaussian, Poisson) or AUC (Bernoulli).
    pub per_task: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// nMSE over the masked entries of each Gaussian or Poisson task, averaged
/// over tasks. Poisson values are compared on the `log(1 + y)` scale.
/// Variances use the population convention. Bernoulli tasks are skipped.
pub fn nmse(pred: ArrayView2<f64>, truth: ArrayView2<f64>, mask: ArrayView2<bool>, tasks: &[Family]) -> Option<f64> {
    score_tasks(pred, truth, mask, tasks).nmse
}

/// Mean rank AUC over the masked entries of Bernoulli tasks.
pub fn aauc(pred: ArrayView2<f64>, truth: ArrayView2<f64>, mask: ArrayView2<bool>, tasks: &[Family]) -> Option<f64> {
    score_tasks(pred, truth, mask, tasks).aauc
}

pub fn score_tasks(pred: ArrayView2<f64>, truth: ArrayView2<f64>, mask: ArrayView2<bool>, tasks: &[Family]) -> TaskScores {
    assert_eq!(pred.dim(), truth.dim(), "prediction and truth shapes differ");
    assert_eq!(pred.dim(), mask.dim(), "prediction and mask shapes differ");
    let mut out = TaskScores::default();
    let (mut nmse_vals, mut auc_vals) = (Vec::new(), Vec::new());
    for (j, fam) in tasks.iter().enumerate() {
        let rows: Vec<usize> = (0..pred.nrows()).filter(|&i| mask[[i, j]]).collect();
        let score = if fam.kind() == FamilyKind::Bernoulli {
            let s: Vec<f64> = rows.iter().map(|&i| pred[[i, j]]).collect();
            let l: Vec<bool> = rows.iter().map(|&i| truth[[i, j]] > 0.5).collect();
            let auc = rank_auc(&s, &l);
            match auc {
                Some(a) => auc_vals.push(a),
                None => out.warnings.push(format!("task {j}: single class among scored entries")),
            }
            auc
        } else {
            let t: Vec<f64> = rows.iter().map(|&i| transform(fam, truth[[i, j]])).collect();
            let p: Vec<f64> = rows.iter().map(|&i| transform(fam, pred[[i, j]])).collect();
            let len = t.len() as f64;
            let mean = t.iter().sum::<f64>() / len;
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
            if t.len() < 2 || !(var > 0.0) {
                out.warnings.push(format!("task {j}: fewer than two entries or zero variance, excluded"));
                None
            } else {
                let mse = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len;
                nmse_vals.push(mse / var);
                Some(mse / var)
            }
        };
        out.per_task.push(score);
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    out.nmse = mean(&nmse_vals);
    out.aauc = mean(&auc_vals);
    out
}

/// Largest number of components for the exhaustive matching search.
pub const MAX_MATCH_K: usize = 8;

/// Permutation `sigma` minimizing `sum_r ||hat[sigma(r)] - truth[r]||_F`:
/// estimated component `sigma[r]` is matched to true component `r`. Ties go
/// to the lexicographically smallest permutation.
pub fn match_components(beta_hat: &Array3<f64>, beta_true: &Array3<f64>) -> Result<Vec<usize>> {
    if beta_hat.dim() != beta_true.dim() {
        return Err(HermitError::Dimension(format!("{:?} vs {:?}", beta_hat.dim(), beta_true.dim())));
    }
    let k = beta_hat.dim().2;
    if k > MAX_MATCH_K {
        return Err(HermitError::Unsupported(format!("component matching supports k <= {MAX_MATCH_K}, got {k}")));
    }
    let mut cost = Array2::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let diff = &beta_hat.index_axis(Axis(2), a) - &beta_true.index_axis(Axis(2), b);
            cost[[a, b]] = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = (0..k).map(|r| cost[[perm[r], r]]).sum();
        if c < best_cost {
            best_cost = c;
            best = perm.clone();
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// Advance to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// AUC of `|beta_hat|` against the support of `beta_true` after matching
/// components. The intercept row is left out when `skip_intercept`.
pub fn feature_selection_auc(beta_hat: &Array3<f64>, beta_true: &Array3<f64>, skip_intercept: bool) -> Result<Option<f64>> {
    let perm = match_components(beta_hat, beta_true)?;
    let aligned = beta_hat.select(Axis(2), &perm);
    let start = usize::from(skip_intercept);
    let (d, m, k) = beta_true.dim();
    let mut scores = Vec::with_capacity(d * m * k);
    let mut labels = Vec::with_capacity(d * m * k);
    for f in start..d {
        for j in 0..m {
            for r in 0..k {
                scores.push(aligned[[f, j, r]].abs());
                labels.push(beta_true[[f, j, r]] != 0.0);
            }
        }
    }
    Ok(rank_auc(&scores, &labels))
}
