//! Held-out evaluation: impute a random half of the observed test targets
//! from the other half, or predict every target from features alone.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::error::{HermitError, Result};
use crate::expfamily::FamilyKind;
use crate::metrics::{score_tasks, TaskScores};
use crate::model::{impute, Dataset, MixtureModel};
use crate::moe::{moe_responsibilities, GatingModel};
use crate::util::rng_for;

#[derive(Debug, Clone, Serialize)]
pub struct Benchmark {
    pub scores: TaskScores,
    /// nMSE restricted to Gaussian tasks.
    pub gaussian_nmse: Option<f64>,
    /// nMSE of Poisson tasks on the `log(1 + y)` scale.
    pub poisson_nmse: Option<f64>,
    pub scored_entries: usize,
}

impl Benchmark {
    fn new(scores: TaskScores, data: &Dataset, scored_entries: usize) -> Self {
        let fam_mean = |kind: FamilyKind| {
            let v: Vec<f64> = scores
                .per_task
                .iter()
                .zip(data.tasks())
                .filter(|(_, f)| f.kind() == kind)
                .filter_map(|(s, _)| *s)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let gaussian_nmse = fam_mean(FamilyKind::Gaussian);
        let poisson_nmse = fam_mean(FamilyKind::Poisson);
        Benchmark { scores, gaussian_nmse, poisson_nmse, scored_entries }
    }
}

/// Hide each observed entry with probability `hide_fraction`, keeping at
/// least one observed target per row. Returns the reduced mask and the
/// hidden entries.
pub fn hide_targets(data: &Dataset, hide_fraction: f64, seed: u64) -> Result<(Array2<bool>, Array2<bool>)> {
    if !(0.0..=1.0).contains(&hide_fraction) {
        return Err(HermitError::InvalidConfig(format!("hide fraction must lie in [0, 1], got {hide_fraction}")));
    }
    let mut rng = rng_for(seed, 3);
    let obs = data.observed();
    let mut keep = obs.clone();
    let mut hidden = Array2::from_elem(obs.dim(), false);
    for i in 0..data.n() {
        for j in 0..data.m() {
            if obs[[i, j]] && rng.gen_bool(hide_fraction) {
                keep[[i, j]] = false;
                hidden[[i, j]] = true;
            }
        }
        if !keep.row(i).iter().any(|&o| o) {
            let cand: Vec<usize> = (0..data.m()).filter(|&j| hidden[[i, j]]).collect();
            let j = cand[rng.gen_range(0..cand.len())];
            keep[[i, j]] = true;
            hidden[[i, j]] = false;
        }
    }
    Ok((keep, hidden))
}

/// Impute hidden targets with posterior weights computed from the visible
/// ones, and score the hidden entries.
pub fn impute_benchmark(model: &MixtureModel, test: &Dataset, hide_fraction: f64, seed: u64) -> Result<Benchmark> {
    let (keep, hidden) = hide_targets(test, hide_fraction, seed)?;
    let visible = test.with_observed(keep)?;
    let pred = impute(&model.without_zeta(), &visible)?;
    let count = hidden.iter().filter(|&&h| h).count();
    let scores = score_tasks(pred.view(), test.y().view(), hidden.view(), test.tasks());
    Ok(Benchmark::new(scores, test, count))
}

/// Same protocol for a gated model: posteriors combine the gate with the
/// visible targets.
pub fn impute_benchmark_moe(
    model: &MixtureModel,
    gate: &GatingModel,
    test: &Dataset,
    hide_fraction: f64,
    seed: u64,
) -> Result<Benchmark> {
    let (keep, hidden) = hide_targets(test, hide_fraction, seed)?;
    let visible = test.with_observed(keep)?;
    let rho = moe_responsibilities(model, gate, &visible)?;
    let means = crate::model::natural_params(&model.without_zeta(), visible.x().view())?;
    let (n, m, k) = means.dim();
    let mut pred = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let fam = &model.families()[j];
            pred[[i, j]] = (0..k).map(|r| rho.rho()[[i, r]] * fam.mean_unchecked(means[[i, j, r]])).sum();
        }
    }
    let count = hidden.iter().filter(|&&h| h).count();
    let scores = score_tasks(pred.view(), test.y().view(), hidden.view(), test.tasks());
    Ok(Benchmark::new(scores, test, count))
}

/// Score predictions of every observed test target.
pub fn prediction_benchmark(pred: &Array2<f64>, test: &Dataset) -> Result<Benchmark> {
    if pred.dim() != (test.n(), test.m()) {
        return Err(HermitError::Dimension(format!("predictions {:?} vs data ({}, {})", pred.dim(), test.n(), test.m())));
    }
    let scores = score_tasks(pred.view(), test.y().view(), test.observed().view(), test.tasks());
    let count = test.observed().iter().filter(|&&o| o).count();
    Ok(Benchmark::new(scores, test, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthSpec};
    use crate::model::predict_prior_mean;
    use ndarray::{Array1, Array3};

    #[test]
    fn nothing_hidden_gives_empty_scores() {
        let syn = generate(&SynthSpec::low_dim(1)).unwrap();
        let b = impute_benchmark(&syn.true_model(), &syn.data, 0.0, 1).unwrap();
        assert_eq!(b.scored_entries, 0);
        assert!(b.scores.nmse.is_none() && b.scores.aauc.is_none());
    }

    #[test]
    fn hidden_mask_keeps_rows_nonempty() {
        let syn = generate(&SynthSpec::varying_k(2, 2)).unwrap();
        let (keep, hidden) = hide_targets(&syn.data, 0.5, 3).unwrap();
        for i in 0..syn.data.n() {
            assert!(keep.row(i).iter().any(|&o| o));
            for j in 0..syn.data.m() {
                assert!(!(keep[[i, j]] && hidden[[i, j]]));
                assert_eq!(keep[[i, j]] || hidden[[i, j]], syn.data.observed()[[i, j]]);
            }
        }
        let frac = hidden.iter().filter(|&&h| h).count() as f64 / syn.data.observed().iter().filter(|&&o| o).count() as f64;
        assert!((frac - 0.5).abs() < 0.03);
    }

    #[test]
    fn single_component_imputation_is_feature_only() {
        let syn = generate(&SynthSpec::varying_k(2, 4)).unwrap();
        let beta = syn.beta().slice(ndarray::s![.., .., 0..1]).to_owned();
        let model = MixtureModel::new(beta, Array1::ones(1), syn.data.tasks().to_vec(), 1.0).unwrap();
        let b = impute_benchmark(&model, &syn.data, 0.5, 5).unwrap();
        let (_, hidden) = hide_targets(&syn.data, 0.5, 5).unwrap();
        let prior = predict_prior_mean(&model, syn.data.x().view()).unwrap();
        let direct = score_tasks(prior.view(), syn.data.y().view(), hidden.view(), syn.data.tasks());
        assert_eq!(b.scores.per_task, direct.per_task);
    }

    #[test]
    fn true_model_imputes_well() {
        let syn = generate(&SynthSpec { n: 1000, m_poisson: 0, ..SynthSpec::varying_k(3, 6) }).unwrap();
        let b = impute_benchmark(&syn.true_model(), &syn.data, 0.5, 7).unwrap();
        assert!(b.scores.aauc.unwrap() > 0.9);
        assert!(b.gaussian_nmse.unwrap() < 0.25);
        assert!(b.poisson_nmse.is_none());
    }

    #[test]
    fn uniform_gate_matches_plain_imputation() {
        let syn = generate(&SynthSpec::varying_k(2, 8)).unwrap();
        let model = syn.true_model();
        let gate = GatingModel::new(Array2::zeros((32, 2))).unwrap();
        let a = impute_benchmark(&model, &syn.data, 0.5, 9).unwrap();
        let b = impute_benchmark_moe(&model, &gate, &syn.data, 0.5, 9).unwrap();
        for (x, y) in a.scores.per_task.iter().zip(&b.scores.per_task) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
        }
        let _ = Array3::<f64>::zeros((1, 1, 1));
    }
}
