//! Weighted penalized GLM subproblems solved in the M-step, and the active
//! set bookkeeping that restricts them to nonzero coefficients.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::Result;
use crate::expfamily::Family;
use crate::model::Dataset;
use crate::penalty::{PenaltyConfig, PenaltyKind};

use super::apg::{apg_minimize, ApgOptions, NormPenalty, SmoothObjective};

/// `sum_ij w_ij * (b_j(eta_ij) - y_ij eta_ij) / a_j` with `eta = X B + offset`.
pub(crate) struct GlmBlock {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub w: Array2<f64>,
    pub offset: Option<Array2<f64>>,
    pub families: Vec<Family>,
}

// Blocks are tall and thin, where row-wise AXPY loops beat a packed GEMM.

/// Four-way unrolled dot product, so the compiler can vectorize it.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `X B` for row-major `X` (n x p) and `B` (p x q).
fn x_times(x: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let q = b.ncols();
    let b = b.as_standard_layout();
    let bs = b.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("row-major block");
    if q == 1 {
        let out: Vec<f64> = xs.chunks_exact(p.max(1)).map(|xi| dot(xi, bs)).take(n).collect();
        return Array2::from_shape_vec((n, 1), if p == 0 { vec![0.0; n] } else { out }).expect("shape");
    }
    let mut out = vec![0.0; n * q];
    for (xi, oi) in xs.chunks_exact(p.max(1)).zip(out.chunks_exact_mut(q.max(1))) {
        for (&xv, bf) in xi.iter().zip(bs.chunks_exact(q.max(1))) {
            if xv != 0.0 {
                for (o, &bv) in oi.iter_mut().zip(bf) {
                    *o += xv * bv;
                }
            }
        }
    }
    Array2::from_shape_vec((n, q), out).expect("shape")
}

/// `X^T R` for row-major `X` (n x p) and `R` (n x q).
fn xt_times(x: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let (_, p) = x.dim();
    let q = r.ncols();
    let r = r.as_standard_layout();
    let rs = r.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("row-major block");
    let mut acc = vec![0.0; p * q];
    if q == 1 {
        for (xi, &rv) in xs.chunks_exact(p.max(1)).zip(rs) {
            if rv != 0.0 {
                for (a, &xv) in acc.iter_mut().zip(xi) {
                    *a += rv * xv;
                }
            }
        }
        return Array2::from_shape_vec((p, 1), acc).expect("shape");
    }
    for (xi, ri) in xs.chunks_exact(p.max(1)).zip(rs.chunks_exact(q.max(1))) {
        if ri.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (&xv, gf) in xi.iter().zip(acc.chunks_exact_mut(q.max(1))) {
            for (g, &rv) in gf.iter_mut().zip(ri) {
                *g += xv * rv;
            }
        }
    }
    Array2::from_shape_vec((p, q), acc).expect("shape")
}

impl GlmBlock {
    fn eta(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut e = x_times(&self.x, b);
        if let Some(o) = &self.offset {
            e += o;
        }
        e
    }

    /// Loss and the residual matrix `w * (b'(eta) - y) / a`.
    fn loss_and_residual(&self, eta: &Array2<f64>) -> (f64, Array2<f64>) {
        let (n, q) = eta.dim();
        let mut resid = Array2::zeros((n, q));
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..q {
                let w = self.w[[i, j]];
                if w != 0.0 {
                    let fam = &self.families[j];
                    let (y, e) = (self.y[[i, j]], eta[[i, j]]);
                    let (l, g) = fam.kernel_and_grad(y, e);
                    total += w * l;
                    resid[[i, j]] = w * g;
                }
            }
        }
        (total, resid)
    }

    pub fn gradient_at(&self, b: &Array2<f64>) -> Array2<f64> {
        let (_, r) = self.loss_and_residual(&self.eta(b));
        xt_times(&self.x, &r)
    }
}

impl SmoothObjective for GlmBlock {
    fn value(&self, b: &Array2<f64>) -> f64 {
        let eta = self.eta(b);
        let mut total = 0.0;
        for ((w, y), (e, fam_idx)) in self
            .w
            .iter()
            .zip(self.y.iter())
            .zip(eta.iter().zip((0..self.w.len()).map(|idx| idx % self.families.len())))
        {
            if *w != 0.0 {
                total += w * self.families[fam_idx].neg_loglik_kernel(*y, *e);
            }
        }
        total
    }

    fn value_grad(&self, b: &Array2<f64>) -> (f64, Array2<f64>) {
        let (v, r) = self.loss_and_residual(&self.eta(b));
        (v, xt_times(&self.x, &r))
    }
}

/// Which coefficients are currently optimized.
///
/// A unit (an entry for the entrywise penalty, a row for the group penalty)
/// is frozen once it has been zero after two consecutive M-steps. Frozen
/// units are skipped until a full pass re-checks their optimality condition.
#[derive(Debug, Clone)]
pub(crate) struct ActiveSet {
    kind: PenaltyKind,
    /// `(d, m, k)` for entrywise, `(d, 1, k)` for row groups.
    zero_count: Array3<u8>,
    enabled: bool,
}

pub(crate) const FREEZE_AFTER: u8 = 2;

impl ActiveSet {
    pub fn new(kind: PenaltyKind, d: usize, m: usize, k: usize, enabled: bool) -> Self {
        let cols = if kind == PenaltyKind::Entrywise { m } else { 1 };
        ActiveSet { kind, zero_count: Array3::zeros((d, cols, k)), enabled }
    }

    /// Freeze every unit except `exempt`; the next full pass activates the
    /// ones violating their optimality condition.
    pub fn freeze_all(&mut self, exempt: Option<usize>) {
        if !self.enabled {
            return;
        }
        self.zero_count.fill(FREEZE_AFTER);
        if let Some(e) = exempt {
            self.zero_count.slice_mut(s![e, .., ..]).fill(0);
        }
    }

    fn frozen(&self, f: usize, col: usize, r: usize) -> bool {
        self.enabled && self.zero_count[[f, col, r]] >= FREEZE_AFTER
    }

    pub fn any_frozen(&self) -> bool {
        self.enabled && self.zero_count.iter().any(|&c| c >= FREEZE_AFTER)
    }
}

pub(crate) struct MStepInput<'a> {
    pub data: &'a Dataset,
    pub rho: ArrayView2<'a, f64>,
    pub pi: &'a [f64],
    pub pen: &'a PenaltyConfig,
    /// Mean shifts `(n, m, k)`, added to the natural parameters.
    pub zeta: Option<&'a Array3<f64>>,
    pub opts: ApgOptions,
    pub full_pass: bool,
}

struct Subproblem {
    r: usize,
    /// Task columns covered (one task for entrywise, all for row groups).
    tasks: Vec<usize>,
}

struct SubResult {
    r: usize,
    tasks: Vec<usize>,
    block: Array2<f64>,
    iterations: usize,
}

/// Rows with zero weight in every covered task contribute nothing to the
/// loss or gradient, so they are left out of the block.
fn build_block(inp: &MStepInput, sp: &Subproblem, features: &[usize]) -> GlmBlock {
    let data = inp.data;
    let n = data.n() as f64;
    let rho_r = inp.rho.column(sp.r);
    let obs = data.observed();
    let rows: Vec<usize> =
        (0..data.n()).filter(|&i| rho_r[i] > 0.0 && sp.tasks.iter().any(|&j| obs[[i, j]])).collect();
    let x = data.x().select(Axis(0), &rows).select(Axis(1), features).as_standard_layout().into_owned();
    let y = data.y().select(Axis(0), &rows).select(Axis(1), &sp.tasks);
    let mut w = Array2::zeros((rows.len(), sp.tasks.len()));
    for (c, &j) in sp.tasks.iter().enumerate() {
        for (a, &i) in rows.iter().enumerate() {
            if obs[[i, j]] {
                w[[a, c]] = rho_r[i] / n;
            }
        }
    }
    let offset = inp
        .zeta
        .map(|z| z.slice(s![.., .., sp.r]).select(Axis(0), &rows).select(Axis(1), &sp.tasks));
    let families = sp.tasks.iter().map(|&j| data.tasks()[j]).collect();
    GlmBlock { x, y, w, offset, families }
}

/// Smooth part of the M-step objective in the coefficients, with its
/// gradient in the `(d, m, k)` layout of `beta`.
pub(crate) fn smooth_value_grad(
    data: &Dataset,
    rho: &Array2<f64>,
    beta: &Array3<f64>,
    zeta: Option<&Array3<f64>>,
) -> (f64, Array3<f64>) {
    let (d, m, k) = beta.dim();
    let pen = PenaltyConfig::lasso(0.0);
    let pi = vec![1.0 / k as f64; k];
    let inp = MStepInput { data, rho: rho.view(), pi: &pi, pen: &pen, zeta, opts: ApgOptions::default(), full_pass: false };
    let features: Vec<usize> = (0..d).collect();
    let mut grad = Array3::zeros((d, m, k));
    let mut total = 0.0;
    for r in 0..k {
        let sp = Subproblem { r, tasks: (0..m).collect() };
        let block = build_block(&inp, &sp, &features);
        let (v, g) = block.value_grad(&beta.slice(s![.., .., r]).to_owned());
        total += v;
        grad.slice_mut(s![.., .., r]).assign(&g);
    }
    (total, grad)
}

fn solve_subproblem(inp: &MStepInput, active: &ActiveSet, beta: &Array3<f64>, sp: &Subproblem) -> Result<SubResult> {
    let d = inp.data.d();
    let exempt = inp.pen.exempt_row();
    let weight = inp.pen.weight(inp.pi[sp.r]);
    let col = |c: usize| if active.kind == PenaltyKind::Entrywise { sp.tasks[c] } else { 0 };
    let current: Array2<f64> = beta.slice(s![.., .., sp.r]).select(Axis(1), &sp.tasks);

    let mut is_active: Vec<bool> = (0..d).map(|f| Some(f) == exempt || !active.frozen(f, col(0), sp.r)).collect();
    let mut block = current.clone();
    let mut iterations = 0;
    // A full pass repeats until no frozen unit violates its optimality
    // condition; otherwise a single solve over the active units.
    let max_rounds = if inp.full_pass { 10 } else { 1 };
    for round in 0..max_rounds {
        if inp.full_pass && active.enabled {
            let full = build_block(inp, sp, &(0..d).collect::<Vec<_>>());
            let grad = full.gradient_at(&block);
            let mut added = false;
            for f in 0..d {
                if is_active[f] {
                    continue;
                }
                let g = grad.row(f);
                let violated = match active.kind {
                    PenaltyKind::Entrywise => g[0].abs() > weight,
                    PenaltyKind::RowGroup => g.iter().map(|v| v * v).sum::<f64>().sqrt() > weight,
                };
                if violated {
                    is_active[f] = true;
                    added = true;
                }
            }
            if round > 0 && !added {
                break;
            }
        }
        let features: Vec<usize> = (0..d).filter(|&f| is_active[f]).collect();
        if features.is_empty() {
            break;
        }
        let glm = build_block(inp, sp, &features);
        let local_exempt = exempt.and_then(|e| features.iter().position(|&f| f == e));
        let prox = NormPenalty { kind: inp.pen.kind, weight, exempt_row: local_exempt };
        let init = block.select(Axis(0), &features);
        let out = apg_minimize(&glm, &prox, &init, inp.opts)?;
        iterations += out.iterations;
        for (li, &f) in features.iter().enumerate() {
            block.row_mut(f).assign(&out.x.row(li));
        }
        if !(inp.full_pass && active.enabled) {
            break;
        }
    }
    for f in 0..d {
        if !is_active[f] {
            block.row_mut(f).fill(0.0);
        }
    }
    Ok(SubResult { r: sp.r, tasks: sp.tasks.clone(), block, iterations })
}

/// Decrease the expected penalized complete negative log-likelihood in the
/// coefficients, warm-started at `beta`. Returns total inner iterations.
pub(crate) fn m_step_beta(inp: &MStepInput, active: &mut ActiveSet, beta: &mut Array3<f64>) -> Result<usize> {
    let (_, m, k) = beta.dim();
    let subproblems: Vec<Subproblem> = match inp.pen.kind {
        PenaltyKind::Entrywise => (0..k).flat_map(|r| (0..m).map(move |j| Subproblem { r, tasks: vec![j] })).collect(),
        PenaltyKind::RowGroup => (0..k).map(|r| Subproblem { r, tasks: (0..m).collect() }).collect(),
    };
    let snapshot: &Array3<f64> = beta;
    let active_ref: &ActiveSet = active;
    let results: Vec<SubResult> = subproblems
        .par_iter()
        .map(|sp| solve_subproblem(inp, active_ref, snapshot, sp))
        .collect::<Result<_>>()?;

    let mut total = 0;
    for res in results {
        total += res.iterations;
        for (c, &j) in res.tasks.iter().enumerate() {
            beta.slice_mut(s![.., j, res.r]).assign(&res.block.column(c));
        }
        for f in 0..beta.dim().0 {
            let row = res.block.row(f);
            match active.kind {
                PenaltyKind::Entrywise => {
                    let cnt = &mut active.zero_count[[f, res.tasks[0], res.r]];
                    *cnt = if row[0] == 0.0 { cnt.saturating_add(1) } else { 0 };
                }
                PenaltyKind::RowGroup => {
                    let cnt = &mut active.zero_count[[f, 0, res.r]];
                    *cnt = if row.iter().all(|&v| v == 0.0) { cnt.saturating_add(1) } else { 0 };
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::util::rng_for;

    fn random_block(seed: u64, with_offset: bool) -> GlmBlock {
        let mut rng = rng_for(seed, 0);
        let (n, p) = (15, 4);
        let families = vec![Family::gaussian(), Family::bernoulli(), Family::poisson()];
        let x = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
        let mut y = Array2::zeros((n, 3));
        for i in 0..n {
            y[[i, 0]] = StandardNormal.sample(&mut rng);
            y[[i, 1]] = rng.gen_range(0..2) as f64;
            y[[i, 2]] = rng.gen_range(0..6) as f64;
        }
        let w = Array2::from_shape_fn((n, 3), |_| rng.gen_range(0.0..1.0) / n as f64);
        let offset = with_offset.then(|| Array2::from_shape_fn((n, 3), |_| 0.3 * { let v: f64 = StandardNormal.sample(&mut rng); v }));
        GlmBlock { x, y, w, offset, families }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let glm = random_block(seed, seed % 2 == 0);
            let mut rng = rng_for(seed, 9);
            let b = Array2::from_shape_fn((4, 3), |_| 0.4 * { let v: f64 = StandardNormal.sample(&mut rng); v });
            let (_, g) = glm.value_grad(&b);
            let h = 1e-6;
            for idx in 0..12 {
                let (f, j) = (idx / 3, idx % 3);
                let mut bp = b.clone();
                bp[[f, j]] += h;
                let mut bm = b.clone();
                bm[[f, j]] -= h;
                let fd = (glm.value(&bp) - glm.value(&bm)) / (2.0 * h);
                let rel = (fd - g[[f, j]]).abs() / g[[f, j]].abs().max(1e-3);
                assert!(rel < 1e-5, "seed {seed} ({f},{j}) fd {fd} analytic {}", g[[f, j]]);
            }
        }
    }

    #[test]
    fn value_matches_value_grad() {
        let glm = random_block(3, true);
        let b = Array2::from_elem((4, 3), 0.1);
        assert!((glm.value(&b) - glm.value_grad(&b).0).abs() < 1e-14);
        let _ = Array1::<f64>::zeros(1);
    }
}
