use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for `stream` under a root seed. Streams are independent, so any
/// indexed unit of work (grid cell, replication, task) can be reproduced
/// on its own.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a root seed and a counter (splitmix64 finalizer).
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn logsumexp(v: ArrayView1<f64>) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + ordered_sum(v.iter().map(|&x| (x - mx).exp())).ln()
}

/// Sum in ascending order, so the result does not depend on input order.
pub fn ordered_sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = it.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum()
}

/// Row-wise softmax of `logits`; also returns each row's log-sum-exp.
pub fn softmax_rows(logits: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = logits.to_owned();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, l) in out.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let s = ordered_sum(row.iter().cloned());
        row /= s;
        *l = mx + s.ln();
    }
    (out, lse)
}

pub fn max_abs<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
