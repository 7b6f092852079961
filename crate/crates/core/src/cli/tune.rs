//! Grid search over (k, lambda, penalty kind) scored by validation
//! log-likelihood.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HermitError, Result};
use crate::model::{log_likelihood, Dataset, MixtureModel, ResponsibilityMatrix};
use crate::moe::{fit_moe, moe_log_likelihood, GatingModel};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::solver::{fit, FitConfig, FitReport};

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneGrid {
    pub lambdas: Vec<f64>,
    pub ks: Vec<usize>,
    pub kinds: Vec<PenaltyKind>,
    /// Fit mixtures of experts instead of plain mixtures.
    pub moe: bool,
    /// Gate penalties tried when `moe` is set.
    pub lambda2s: Vec<f64>,
    pub gamma: f64,
    /// `None`: exempt the intercept row when the data has one.
    pub exempt_intercept: Option<bool>,
}

impl Default for TuneGrid {
    /// 30 log-spaced lambdas in [1e-6, 1e3], k from 1 to 10, entrywise penalty.
    fn default() -> Self {
        TuneGrid {
            lambdas: log_grid(1e-6, 1e3, 30),
            ks: (1..=10).collect(),
            kinds: vec![PenaltyKind::Entrywise],
            moe: false,
            lambda2s: vec![1e-3],
            gamma: 1.0,
            exempt_intercept: None,
        }
    }
}

impl TuneGrid {
    pub fn single(k: usize, lambda: f64, kind: PenaltyKind) -> Self {
        TuneGrid { lambdas: vec![lambda], ks: vec![k], kinds: vec![kind], ..TuneGrid::default() }
    }

    fn cells(&self) -> Vec<Cell> {
        let l2: Vec<Option<f64>> = if self.moe { self.lambda2s.iter().map(|&v| Some(v)).collect() } else { vec![None] };
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &k in &self.ks {
                for &lambda in &self.lambdas {
                    for &lambda2 in &l2 {
                        out.push(Cell { k, lambda, kind, lambda2 });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub k: usize,
    pub lambda: f64,
    pub kind: PenaltyKind,
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    #[serde(flatten)]
    pub cell: Cell,
    pub valid_loglik: Option<f64>,
    pub final_objective: Option<f64>,
    pub n_outer: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub cell: Cell,
    pub model: MixtureModel,
    pub gate: Option<GatingModel>,
    pub rho: ResponsibilityMatrix,
    pub report: FitReport,
    pub valid_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best: Tuned,
    pub cells: Vec<CellReport>,
}

fn run_cell(train: &Dataset, valid: &Dataset, grid: &TuneGrid, base: &FitConfig, cell: Cell) -> Result<Tuned> {
    let pen = PenaltyConfig { kind: cell.kind, lambda: cell.lambda, gamma: grid.gamma, exempt_intercept: grid.exempt_intercept };
    let cfg = FitConfig { k: cell.k, ..*base };
    match cell.lambda2 {
        Some(l2) => {
            let f = fit_moe(train, &pen, l2, &cfg)?;
            let ll = moe_log_likelihood(&f.model, &f.gate, valid)?;
            let mut report = f.report;
            report.validation_loglik = Some(ll);
            Ok(Tuned { cell, model: f.model, gate: Some(f.gate), rho: f.rho, report, valid_loglik: ll })
        }
        None => {
            let (model, rho, mut report) = fit(train, &pen, &cfg)?;
            let ll = log_likelihood(&model, valid)?;
            report.validation_loglik = Some(ll);
            Ok(Tuned { cell, model, gate: None, rho, report, valid_loglik: ll })
        }
    }
}

/// Whether `a` should replace the incumbent `b`: higher validation
/// log-likelihood wins; near ties go to smaller k, then larger lambda.
fn better(a: &Tuned, b: &Tuned) -> bool {
    let tol = 1e-9 * a.valid_loglik.abs().max(b.valid_loglik.abs()).max(1.0);
    if (a.valid_loglik - b.valid_loglik).abs() > tol {
        return a.valid_loglik > b.valid_loglik;
    }
    if a.cell.k != b.cell.k {
        return a.cell.k < b.cell.k;
    }
    a.cell.lambda > b.cell.lambda
}

/// Fit every grid cell on `train` and keep the one with the highest
/// log-likelihood on `valid`. Cells run concurrently; every cell uses the
/// seed in `base`, so results do not depend on scheduling.
pub fn tune(train: &Dataset, valid: &Dataset, grid: &TuneGrid, base: &FitConfig) -> Result<TuneResult> {
    if train.tasks() != valid.tasks() || train.d() != valid.d() {
        return Err(HermitError::Dimension("training and validation data differ in tasks or features".into()));
    }
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(HermitError::InvalidConfig("empty tuning grid".into()));
    }
    let fits: Vec<Result<Tuned>> = cells.par_iter().map(|&c| run_cell(train, valid, grid, base, c)).collect();
    let mut reports = Vec::with_capacity(cells.len());
    let mut best: Option<Tuned> = None;
    for (cell, r) in cells.iter().zip(fits) {
        match r {
            Ok(t) if t.valid_loglik.is_finite() => {
                reports.push(CellReport {
                    cell: *cell,
                    valid_loglik: Some(t.valid_loglik),
                    final_objective: Some(t.report.final_objective()),
                    n_outer: t.report.n_outer,
                    converged: t.report.converged,
                    error: None,
                });
                if best.as_ref().map_or(true, |b| better(&t, b)) {
                    best = Some(t);
                }
            }
            Ok(t) => reports.push(CellReport {
                cell: *cell,
                valid_loglik: None,
                final_objective: Some(t.report.final_objective()),
                n_outer: t.report.n_outer,
                converged: t.report.converged,
                error: Some("non-finite validation log-likelihood".into()),
            }),
            Err(e) => reports.push(CellReport {
                cell: *cell,
                valid_loglik: None,
                final_objective: None,
                n_outer: 0,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some(best) => Ok(TuneResult { best, cells: reports }),
        None => {
            let msgs: Vec<String> = reports.iter().filter_map(|r| r.error.clone()).collect();
            Err(HermitError::NonFinite(format!("every grid cell failed: {}", msgs.join("; "))))
        }
    }
}
