//! Synthetic mixture-regression data with known ground truth.

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{HermitError, Result};
use crate::expfamily::{logistic, Family, FamilyKind, POISSON_NAT_CLAMP};
use crate::model::{Dataset, MixtureModel};
use crate::moe::gating_probs;
use crate::util::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub m_gaussian: usize,
    pub m_bernoulli: usize,
    pub m_poisson: usize,
    pub k_true: usize,
    /// Nonzero feature rows per component, besides the bias row.
    pub s: usize,
    pub coef_range: (f64, f64),
    pub poisson_coef_range: (f64, f64),
    pub bias: f64,
    pub poisson_bias: f64,
    pub sigma: f64,
    /// Mixture weights; uniform when absent.
    pub pi_true: Option<Vec<f64>>,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::low_dim(0)
    }
}

/// Rows per component so that `k` components use half of `d` features.
pub fn sparsity_for(d: usize, k: usize) -> usize {
    d / (2 * k)
}

impl SynthSpec {
    /// n=100, d=15, s=3, 3 Gaussian / 10 Bernoulli / 2 Poisson tasks, k=2.
    pub fn low_dim(seed: u64) -> Self {
        SynthSpec {
            n: 100,
            d: 15,
            m_gaussian: 3,
            m_bernoulli: 10,
            m_poisson: 2,
            k_true: 2,
            s: 3,
            coef_range: (1.0, 3.0),
            poisson_coef_range: (0.1, 0.3),
            bias: 1.0,
            poisson_bias: 3.0,
            sigma: 1.0,
            pi_true: Some(vec![0.5, 0.5]),
            missing_rate: 0.0,
            seed,
        }
    }

    /// n=180, d=320, 8 Gaussian / 10 Bernoulli / 2 Poisson tasks, k=2.
    pub fn high_dim(seed: u64) -> Self {
        SynthSpec { n: 180, d: 320, m_gaussian: 8, ..SynthSpec::low_dim(seed) }
    }

    /// n=1000, d=32, 3/10/2 tasks, `s = floor(d / 2k)`, coefficients in
    /// [2, 6], 20% missing targets, equal weights.
    pub fn varying_k(k_true: usize, seed: u64) -> Self {
        SynthSpec {
            n: 1000,
            d: 32,
            k_true,
            s: sparsity_for(32, k_true),
            coef_range: (2.0, 6.0),
            pi_true: None,
            missing_rate: 0.2,
            ..SynthSpec::low_dim(seed)
        }
    }

    /// Scaling grid point: k=4, s=4, task counts in the ratio 3:10:2.
    pub fn scaling(d: usize, m: usize, seed: u64) -> Self {
        let unit = m / 15;
        SynthSpec {
            d,
            s: 4,
            m_gaussian: 3 * unit,
            m_bernoulli: 10 * unit,
            m_poisson: m - 13 * unit,
            ..SynthSpec::varying_k(4, seed)
        }
    }

    pub fn m(&self) -> usize {
        self.m_gaussian + self.m_bernoulli + self.m_poisson
    }

    pub fn families(&self) -> Vec<Family> {
        let mut f = vec![Family::gaussian_with_sigma(self.sigma).unwrap_or_else(|_| Family::gaussian()); self.m_gaussian];
        f.extend(std::iter::repeat(Family::bernoulli()).take(self.m_bernoulli));
        f.extend(std::iter::repeat(Family::poisson()).take(self.m_poisson));
        f
    }

    fn group(&self) -> TaskGroup {
        TaskGroup {
            k_true: self.k_true,
            m_gaussian: self.m_gaussian,
            m_bernoulli: self.m_bernoulli,
            m_poisson: self.m_poisson,
            s: Some(self.s),
            pi: self.pi_true.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HermitError::InvalidConfig(msg));
        if self.n == 0 || self.d == 0 || self.k_true == 0 {
            return bad("n, d and k_true must be positive".into());
        }
        if self.m() == 0 {
            return bad("at least one task is required".into());
        }
        for (lo, hi) in [self.coef_range, self.poisson_coef_range] {
            if !(0.0 < lo && lo <= hi) {
                return bad(format!("coefficient interval ({lo}, {hi}) must satisfy 0 < low <= high"));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        Ok(())
    }
}

/// A block of tasks sharing one latent membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub k_true: usize,
    pub m_gaussian: usize,
    pub m_bernoulli: usize,
    pub m_poisson: usize,
    /// Defaults to `floor(d / 2k)`.
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
}

impl TaskGroup {
    pub fn new(k_true: usize, m_gaussian: usize, m_bernoulli: usize, m_poisson: usize) -> Self {
        TaskGroup { k_true, m_gaussian, m_bernoulli, m_poisson, s: None, pi: None }
    }

    pub fn m(&self) -> usize {
        self.m_gaussian + self.m_bernoulli + self.m_poisson
    }
}

/// Anomaly-task configuration: 20 tasks sharing k=4, then ten tasks in
/// groups with k = 1, 6, 2, 3, 5.
pub fn anomaly_groups() -> Vec<TaskGroup> {
    vec![
        TaskGroup::new(4, 5, 10, 5),
        TaskGroup::new(1, 1, 1, 1),
        TaskGroup::new(6, 1, 0, 0),
        TaskGroup::new(2, 1, 1, 0),
        TaskGroup::new(3, 0, 1, 1),
        TaskGroup::new(5, 1, 1, 0),
    ]
}

/// Four clustered groups of 15 tasks each, with k = 1, 2, 3, 4.
pub fn clustered_groups() -> Vec<TaskGroup> {
    (1..=4).map(|k| TaskGroup::new(k, 3, 10, 2)).collect()
}

/// Generating parameters of one task group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTruth {
    pub beta: Array3<f64>,
    pub pi: Array1<f64>,
    /// Gate coefficients when memberships follow a softmax gate.
    pub alpha: Option<Array2<f64>>,
    pub families: Vec<Family>,
    /// First task column of the group in the full target matrix.
    pub offset: usize,
}

impl GroupTruth {
    pub fn model(&self) -> MixtureModel {
        MixtureModel::new(self.beta.clone(), self.pi.clone(), self.families.clone(), 1.0).expect("valid generating model")
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: Dataset,
    /// Targets before any were hidden.
    pub y_full: Array2<f64>,
    /// Memberships per group.
    pub delta: Vec<Vec<usize>>,
    pub truth: Vec<GroupTruth>,
}

impl Synthetic {
    pub fn beta(&self) -> &Array3<f64> {
        &self.truth[0].beta
    }

    pub fn memberships(&self) -> &[usize] {
        &self.delta[0]
    }

    pub fn true_model(&self) -> MixtureModel {
        self.truth[0].model()
    }

    /// Group index of every task column.
    pub fn task_groups(&self) -> Vec<usize> {
        self.truth.iter().enumerate().flat_map(|(g, t)| std::iter::repeat(g).take(t.families.len())).collect()
    }
}

fn magnitude(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let v = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

fn draw_group(spec: &SynthSpec, group: &TaskGroup, offset: usize, rng: &mut ChaCha8Rng) -> Result<GroupTruth> {
    let (d, k) = (spec.d, group.k_true);
    let s = group.s.unwrap_or_else(|| sparsity_for(d, k));
    if s * k + 1 > d {
        return Err(HermitError::InvalidConfig(format!("s*k + 1 = {} exceeds d = {d}", s * k + 1)));
    }
    let families = SynthSpec {
        m_gaussian: group.m_gaussian,
        m_bernoulli: group.m_bernoulli,
        m_poisson: group.m_poisson,
        ..spec.clone()
    }
    .families();
    let m = families.len();
    let mut beta = Array3::zeros((d, m, k));
    for r in 0..k {
        for (j, fam) in families.iter().enumerate() {
            let poisson = fam.kind() == FamilyKind::Poisson;
            beta[[0, j, r]] = if poisson { spec.poisson_bias } else { spec.bias };
            let range = if poisson { spec.poisson_coef_range } else { spec.coef_range };
            for f in s * r + 1..=s * (r + 1) {
                beta[[f, j, r]] = magnitude(rng, range);
            }
        }
    }
    let pi = match &group.pi {
        Some(p) => {
            let p = Array1::from(p.clone());
            if p.len() != k || p.iter().any(|&v| !(v > 0.0)) || (p.sum() - 1.0).abs() > 1e-9 {
                return Err(HermitError::InvalidConfig("pi_true must be a positive simplex vector of length k".into()));
            }
            p
        }
        None => Array1::from_elem(k, 1.0 / k as f64),
    };
    Ok(GroupTruth { beta, pi, alpha: None, families, offset })
}

/// Draw generating parameters for a list of task groups.
pub fn draw_truth(spec: &SynthSpec, groups: &[TaskGroup]) -> Result<Vec<GroupTruth>> {
    spec.validate()?;
    if groups.is_empty() {
        return Err(HermitError::InvalidConfig("no task groups".into()));
    }
    let mut rng = rng_for(spec.seed, 0);
    let mut offset = 0;
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.k_true == 0 || g.m() == 0 {
            return Err(HermitError::InvalidConfig("each group needs k_true >= 1 and at least one task".into()));
        }
        out.push(draw_group(spec, g, offset, &mut rng)?);
        offset += g.m();
    }
    Ok(out)
}

fn draw_target(fam: &Family, eta: f64, rng: &mut ChaCha8Rng) -> f64 {
    match fam.kind() {
        FamilyKind::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            eta + fam.dispersion().sqrt() * z
        }
        FamilyKind::Bernoulli => {
            if Bernoulli::new(logistic(eta)).expect("probability").sample(rng) {
                1.0
            } else {
                0.0
            }
        }
        FamilyKind::Poisson => {
            let rate = eta.clamp(-POISSON_NAT_CLAMP, POISSON_NAT_CLAMP).exp();
            if rate < 1e-12 {
                0.0
            } else {
                Poisson::new(rate).expect("positive rate").sample(rng)
            }
        }
    }
}

/// Draw `n` samples from fixed generating parameters.
pub fn sample(spec: &SynthSpec, truth: &[GroupTruth], n: usize, seed: u64) -> Result<Synthetic> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = rng_for(seed, 1);
    let x = Array2::from_shape_fn((n, d), |(_, f)| if f == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
    let m: usize = truth.iter().map(|g| g.families.len()).sum();
    let mut y = Array2::zeros((n, m));
    let mut delta = Vec::with_capacity(truth.len());
    for g in truth {
        let k = g.pi.len();
        let labels: Vec<usize> = match &g.alpha {
            Some(alpha) => {
                let probs = gating_probs(alpha, &x);
                (0..n)
                    .map(|i| WeightedIndex::new(probs.row(i).iter().copied()).expect("gate row").sample(&mut rng))
                    .collect()
            }
            None if k == 1 => vec![0; n],
            None => {
                let w = WeightedIndex::new(g.pi.iter().copied()).expect("weights");
                (0..n).map(|_| w.sample(&mut rng)).collect()
            }
        };
        for i in 0..n {
            let r = labels[i];
            for (c, fam) in g.families.iter().enumerate() {
                let mut eta = 0.0;
                for f in 0..d {
                    let b = g.beta[[f, c, r]];
                    if b != 0.0 {
                        eta += x[[i, f]] * b;
                    }
                }
                y[[i, g.offset + c]] = draw_target(fam, eta, &mut rng);
            }
        }
        delta.push(labels);
    }
    let mut observed = Array2::from_elem((n, m), true);
    if spec.missing_rate > 0.0 {
        for i in 0..n {
            for j in 0..m {
                observed[[i, j]] = !rng.gen_bool(spec.missing_rate);
            }
            if !observed.row(i).iter().any(|&o| o) {
                observed[[i, rng.gen_range(0..m)]] = true;
            }
        }
    }
    let families: Vec<Family> = truth.iter().flat_map(|g| g.families.iter().copied()).collect();
    let data = Dataset::new(x, y.clone(), observed, families)?;
    Ok(Synthetic { data, y_full: y, delta, truth: truth.to_vec() })
}

/// Single-group dataset drawn from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    let truth = draw_truth(spec, &[spec.group()])?;
    sample(spec, &truth, spec.n, spec.seed)
}

/// Several task groups sharing samples and features, each with its own
/// memberships and coefficients; targets are concatenated group by group.
/// Task counts and k of `spec` are ignored.
pub fn generate_groups(spec: &SynthSpec, groups: &[TaskGroup]) -> Result<Synthetic> {
    let truth = draw_truth(spec, groups)?;
    sample(spec, &truth, spec.n, spec.seed)
}

/// Memberships drawn from a softmax gate whose first `gate_rows_nonzero`
/// rows are standard normal and the rest zero.
pub fn generate_moe(spec: &SynthSpec, gate_rows_nonzero: usize) -> Result<Synthetic> {
    let truth = draw_moe_truth(spec, gate_rows_nonzero)?;
    sample(spec, &truth, spec.n, spec.seed)
}

pub fn draw_moe_truth(spec: &SynthSpec, gate_rows_nonzero: usize) -> Result<Vec<GroupTruth>> {
    if gate_rows_nonzero > spec.d {
        return Err(HermitError::InvalidConfig(format!("{gate_rows_nonzero} gate rows exceed d = {}", spec.d)));
    }
    let mut truth = draw_truth(spec, &[spec.group()])?;
    let mut rng = rng_for(derive_seed(spec.seed, 7), 0);
    let k = spec.k_true;
    let mut alpha = Array2::zeros((spec.d, k));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    alpha.slice_mut(s![..gate_rows_nonzero, ..]).mapv_inplace(|_| normal.sample(&mut rng));
    truth[0].alpha = Some(alpha);
    Ok(truth)
}

/// Replace every observed Gaussian target of `ceil(p_outlier * n)` random
/// samples with 100 and every observed Bernoulli target with 1. Poisson
/// targets are left alone. Returns the new dataset and the sorted indices.
pub fn contaminate(data: &Dataset, p_outlier: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..1.0).contains(&p_outlier) {
        return Err(HermitError::InvalidConfig(format!("p_outlier must lie in [0, 1), got {p_outlier}")));
    }
    let n = data.n();
    let count = ((p_outlier * n as f64).ceil() as usize).min(n);
    let mut rng = rng_for(seed, 2);
    let mut rows = sample_indices(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    let mut y = data.y_with_nan();
    for &i in &rows {
        for (j, fam) in data.tasks().iter().enumerate() {
            if data.observed()[[i, j]] {
                match fam.kind() {
                    FamilyKind::Gaussian => y[[i, j]] = 100.0,
                    FamilyKind::Bernoulli => y[[i, j]] = 1.0,
                    FamilyKind::Poisson => {}
                }
            }
        }
    }
    let y = y.mapv(|v| if v.is_nan() { 0.0 } else { v });
    Ok((data.with_targets(y)?, rows))
}
