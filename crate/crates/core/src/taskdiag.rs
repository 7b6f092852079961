//! Task-level diagnostics: concordant scores for anomaly tasks, NMI
//! similarity between independently fitted tasks, kernel-PCA embedding and
//! k-means grouping of tasks.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{HermitError, Result};
use crate::metrics::soft_mi;
use crate::model::{log_likelihood, responsibilities, Dataset, MixtureModel};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::solver::{fit, FitConfig};
use crate::util::rng_for;

const KL_CLAMP: f64 = 1e-12;

fn sym_kl_rows(p: ArrayView2<f64>, q: ArrayView2<f64>, rows: impl Iterator<Item = usize>) -> f64 {
    let mut acc = 0.0;
    for i in rows {
        for (&a, &b) in p.row(i).iter().zip(q.row(i)) {
            let a = a.clamp(KL_CLAMP, 1.0);
            let b = b.clamp(KL_CLAMP, 1.0);
            // p log(p/q) + q log(q/p)
            acc += (a - b) * (a.ln() - b.ln());
        }
    }
    acc
}

/// Concordant score of every task: minus the symmetrized KL divergence
/// between posteriors from all observed targets and posteriors from that
/// task alone, averaged over the `2 n_h` terms where `n_h` is the number of
/// samples observing the task. `None` for tasks never observed.
pub fn concordant_scores(model: &MixtureModel, data: &Dataset) -> Result<Vec<Option<f64>>> {
    let full = responsibilities(model, data, None)?;
    (0..data.m())
        .map(|h| {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| data.observed()[[i, h]]).collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let single = responsibilities(model, data, Some(&[h]))?;
            let kl = sym_kl_rows(full.rho().view(), single.rho().view(), rows.iter().copied());
            Ok(Some(-kl / (2.0 * rows.len() as f64)))
        })
        .collect()
}

/// Suggested anomaly cut from a 1-D two-means split of the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySplit {
    pub threshold: f64,
    /// Tasks scoring below the threshold, in task order.
    pub anomalous: Vec<usize>,
}

/// Optimal two-cluster split of the available scores. `None` when fewer
/// than two distinct scores exist.
pub fn two_means_split(scores: &[Option<f64>]) -> Option<AnomalySplit> {
    let mut v: Vec<f64> = scores.iter().flatten().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.len() < 2 || v[0] == v[v.len() - 1] {
        return None;
    }
    let sse = |s: &[f64]| {
        let mu = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 1);
    for cut in 1..v.len() {
        if v[cut] == v[cut - 1] {
            continue;
        }
        let cost = sse(&v[..cut]) + sse(&v[cut..]);
        if cost < best.0 {
            best = (cost, cut);
        }
    }
    let threshold = 0.5 * (v[best.1 - 1] + v[best.1]);
    let anomalous = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_some_and(|s| s < threshold))
        .map(|(h, _)| h)
        .collect();
    Some(AnomalySplit { threshold, anomalous })
}

#[derive(Debug, Clone)]
pub struct SimilarityConfig {
    pub per_task_k: usize,
    /// Penalty for the single-task fits; its lambda is used when no grid is given.
    pub pen: PenaltyConfig,
    pub fit: FitConfig,
    /// Candidate lambdas, chosen per task by validation log-likelihood.
    pub lambda_grid: Vec<f64>,
    pub validation: Option<Dataset>,
    /// Minimum observed samples per task; defaults to `10 * per_task_k`.
    pub min_observed: Option<usize>,
}

impl SimilarityConfig {
    pub fn new(per_task_k: usize, lambda: f64) -> Self {
        SimilarityConfig {
            per_task_k,
            pen: PenaltyConfig::new(PenaltyKind::Entrywise, lambda),
            fit: FitConfig::default(),
            lambda_grid: Vec::new(),
            validation: None,
            min_observed: None,
        }
    }
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig::new(20, 0.01)
    }
}

#[derive(Debug, Clone)]
pub struct TaskSimilarity {
    pub matrix: Array2<f64>,
    pub per_task_k: usize,
    /// Lambda used for each task's fit.
    pub lambdas: Vec<f64>,
    pub warnings: Vec<String>,
}

/// One task's posterior over all `n` rows; rows missing the task get the
/// fitted prior.
fn single_task_posterior(data: &Dataset, h: usize, cfg: &SimilarityConfig) -> Result<(Array2<f64>, f64)> {
    let (sub, rows) = data.select_tasks(&[h])?;
    // Same seed for every task, so identical columns give identical fits.
    let fcfg = FitConfig { k: cfg.per_task_k, ..cfg.fit };
    let valid = match &cfg.validation {
        Some(v) if !cfg.lambda_grid.is_empty() => Some(v.select_tasks(&[h])?.0),
        _ => None,
    };
    let grid: Vec<f64> = if valid.is_some() { cfg.lambda_grid.clone() } else { vec![cfg.pen.lambda] };
    let mut best: Option<(f64, f64, MixtureModel)> = None;
    for &lambda in &grid {
        let pen = PenaltyConfig { lambda, ..cfg.pen };
        let (model, _, report) = fit(&sub, &pen, &fcfg)?;
        if !report.final_objective().is_finite() {
            return Err(HermitError::NonFinite(format!("task {h} fit diverged at lambda {lambda}")));
        }
        let score = match &valid {
            Some(v) => log_likelihood(&model, v)?,
            None => 0.0,
        };
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, lambda, model));
        }
    }
    let (_, lambda, model) = best.expect("nonempty grid");
    let rho = responsibilities(&model, &sub, None)?;
    let mut post = Array2::zeros((data.n(), cfg.per_task_k));
    for mut row in post.axis_iter_mut(Axis(0)) {
        row.assign(model.pi());
    }
    for (a, &i) in rows.iter().enumerate() {
        post.row_mut(i).assign(&rho.rho().row(a));
    }
    Ok((post, lambda))
}

/// Fit every task alone with `per_task_k` components, then compare the
/// posteriors pairwise by NMI. A task whose fit fails gets a zero row and
/// column (diagonal still 1) and a warning.
pub fn task_similarity(data: &Dataset, cfg: &SimilarityConfig) -> Result<TaskSimilarity> {
    if cfg.per_task_k == 0 {
        return Err(HermitError::InvalidConfig("per_task_k must be positive".into()));
    }
    cfg.pen.validate()?;
    let min_obs = cfg.min_observed.unwrap_or(10 * cfg.per_task_k);
    for h in 0..data.m() {
        let c = data.n_observed(h);
        if c < min_obs {
            return Err(HermitError::InvalidData(format!("task {h} observed in {c} samples, need {min_obs}")));
        }
    }
    let fits: Vec<Result<(Array2<f64>, f64)>> =
        (0..data.m()).into_par_iter().map(|h| single_task_posterior(data, h, cfg)).collect();
    let m = data.m();
    let mut warnings = Vec::new();
    let mut lambdas = vec![f64::NAN; m];
    let mut posts: Vec<Option<Array2<f64>>> = Vec::with_capacity(m);
    for (h, r) in fits.into_iter().enumerate() {
        match r {
            Ok((p, l)) => {
                lambdas[h] = l;
                posts.push(Some(p));
            }
            Err(e) => {
                warnings.push(format!("task {h}: single-task fit failed ({e}); similarity set to 0"));
                posts.push(None);
            }
        }
    }
    let self_mi: Vec<f64> = posts.iter().map(|p| p.as_ref().map_or(0.0, |p| soft_mi(p.view(), p.view()))).collect();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| (u + 1..m).map(move |v| (u, v))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(u, v)| match (&posts[u], &posts[v]) {
            (Some(p), Some(q)) => {
                let denom = (self_mi[u] * self_mi[v]).sqrt();
                if denom > 0.0 {
                    soft_mi(p.view(), q.view()) / denom
                } else {
                    0.0
                }
            }
            _ => 0.0,
        })
        .collect();
    let mut matrix = Array2::eye(m);
    for (&(u, v), &s) in pairs.iter().zip(&vals) {
        matrix[[u, v]] = s;
        matrix[[v, u]] = s;
    }
    Ok(TaskSimilarity { matrix, per_task_k: cfg.per_task_k, lambdas, warnings })
}

/// Kernel-PCA embedding of a similarity matrix: double-center, keep the top
/// `dims` eigenpairs (negative eigenvalues clipped to 0) and scale each
/// eigenvector by the root of its eigenvalue. Each eigenvector is signed so
/// its largest-magnitude entry is positive.
pub fn kernel_pca(sim: ArrayView2<f64>, dims: usize) -> Result<Array2<f64>> {
    let m = sim.nrows();
    if sim.ncols() != m {
        return Err(HermitError::Dimension(format!("similarity matrix is {:?}", sim.dim())));
    }
    if dims == 0 || dims > m {
        return Err(HermitError::InvalidConfig(format!("dims must lie in 1..={m}, got {dims}")));
    }
    for u in 0..m {
        for v in 0..u {
            if (sim[[u, v]] - sim[[v, u]]).abs() > 1e-9 {
                return Err(HermitError::InvalidData(format!("similarity matrix not symmetric at ({u},{v})")));
            }
        }
    }
    let row_mean = sim.mean_axis(Axis(1)).unwrap();
    let grand = row_mean.mean().unwrap();
    let centered = DMatrix::from_fn(m, m, |u, v| sim[[u, v]] - row_mean[u] - row_mean[v] + grand);
    let eig = SymmetricEigen::new(centered);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Array2::zeros((m, dims));
    for (c, &idx) in order.iter().take(dims).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        let vec = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for u in 1..m {
            if vec[u].abs() > vec[pivot].abs() + 1e-12 {
                pivot = u;
            }
        }
        let sign = if vec[pivot] < 0.0 { -1.0 } else { 1.0 };
        for u in 0..m {
            out[[u, c]] = sign * scale * vec[u];
        }
    }
    Ok(out)
}

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(points: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let (n, dim) = points.dim();
    // k-means++ seeding
    let mut centers = Array2::zeros((k, dim));
    centers.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dd = sq_dist(points.row(i), centers.row(c));
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        centers.fill(0.0);
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = centers.row_mut(labels[i]);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            } else {
                // Empty cluster: move it to the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points.row(a), centers.row(labels[a]))
                            .total_cmp(&sq_dist(points.row(b), centers.row(labels[b])))
                    })
                    .unwrap();
                centers.row_mut(c).assign(&points.row(far));
                labels[far] = c;
            }
        }
    }
    let sse = (0..n).map(|i| sq_dist(points.row(i), centers.row(labels[i]))).sum();
    (labels, sse)
}

/// Relabel so clusters are numbered in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// k-means over embedding rows with k-means++ seeding and
/// [`KMEANS_RESTARTS`] restarts; the lowest within-cluster sum of squares
/// wins. Labels are numbered by first appearance.
pub fn cluster_tasks(embedding: ArrayView2<f64>, groups: usize, seed: u64) -> Result<Vec<usize>> {
    if groups == 0 {
        return Err(HermitError::InvalidConfig("groups must be positive".into()));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(HermitError::NonFinite("embedding contains non-finite values".into()));
    }
    let mut distinct: Vec<Vec<u64>> = embedding.axis_iter(Axis(0)).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    distinct.sort();
    distinct.dedup();
    if groups > distinct.len() {
        return Err(HermitError::InvalidConfig(format!("{groups} groups for {} distinct points", distinct.len())));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng_for(seed, restart as u64);
        let (labels, sse) = kmeans_once(embedding, groups, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| sse < *b) {
            best = Some((sse, labels));
        }
    }
    Ok(canonical(&best.expect("at least one restart").1))
}

/// Mean within-group and between-group similarity for each group.
pub fn group_similarity(sim: ArrayView2<f64>, groups: &[usize]) -> Vec<(f64, f64)> {
    let g = groups.iter().max().map_or(0, |&v| v + 1);
    let m = groups.len();
    (0..g)
        .map(|a| {
            let (mut w, mut wc, mut b, mut bc) = (0.0, 0usize, 0.0, 0usize);
            for u in (0..m).filter(|&u| groups[u] == a) {
                for v in 0..m {
                    if v == u {
                        continue;
                    }
                    if groups[v] == a {
                        w += sim[[u, v]];
                        wc += 1;
                    } else {
                        b += sim[[u, v]];
                        bc += 1;
                    }
                }
            }
            let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
            (mean(w, wc), mean(b, bc))
        })
        .collect()
}

/// Scores with missing tasks rendered as NaN.
pub fn scores_or_nan(scores: &[Option<f64>]) -> Array1<f64> {
    scores.iter().map(|s| s.unwrap_or(f64::NAN)).collect()
}
