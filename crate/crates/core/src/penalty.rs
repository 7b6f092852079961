//! Lasso and row-group-lasso penalties weighted by `pi_r^gamma`, and their
//! proximal maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HermitError, Result};
use crate::model::Dataset;
use crate::util::ordered_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Entrywise l1 norm of each component's `d x m` block.
    #[serde(alias = "lasso")]
    Entrywise,
    /// Sum of the l2 norms of the rows of each component's block.
    #[serde(alias = "group")]
    RowGroup,
}

impl FromStr for PenaltyKind {
    type Err = HermitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entrywise" | "lasso" => Ok(PenaltyKind::Entrywise),
            "row_group" | "rowgroup" | "group" => Ok(PenaltyKind::RowGroup),
            other => Err(HermitError::InvalidConfig(format!("unknown penalty kind '{other}'"))),
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyKind::Entrywise => f.write_str("entrywise"),
            PenaltyKind::RowGroup => f.write_str("row_group"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Leave the first coefficient row unpenalized. `None` means: decide from
    /// the data (exempt when the first feature column is all ones).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exempt_intercept: Option<bool>,
}

fn default_gamma() -> f64 {
    1.0
}

impl PenaltyConfig {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Self {
        PenaltyConfig { kind, lambda, gamma: 1.0, exempt_intercept: None }
    }

    pub fn lasso(lambda: f64) -> Self {
        Self::new(PenaltyKind::Entrywise, lambda)
    }

    pub fn group(lambda: f64) -> Self {
        Self::new(PenaltyKind::RowGroup, lambda)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_exempt_intercept(mut self, exempt: bool) -> Self {
        self.exempt_intercept = Some(exempt);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HermitError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(HermitError::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Fix the intercept exemption against a dataset.
    pub fn resolve(&self, data: &Dataset) -> PenaltyConfig {
        PenaltyConfig { exempt_intercept: Some(self.exempt_intercept.unwrap_or_else(|| data.has_intercept())), ..*self }
    }

    pub fn exempt_row(&self) -> Option<usize> {
        if self.exempt_intercept == Some(true) {
            Some(0)
        } else {
            None
        }
    }

    /// Per-component penalty weight `lambda * pi_r^gamma`.
    pub fn weight(&self, pi_r: f64) -> f64 {
        if self.gamma == 0.0 {
            self.lambda
        } else {
            self.lambda * pi_r.powf(self.gamma)
        }
    }
}

/// Unweighted norm of one `d x m` block, skipping `exempt` row.
pub fn block_norm(block: ArrayView2<f64>, kind: PenaltyKind, exempt: Option<usize>) -> f64 {
    block
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(f, _)| Some(*f) != exempt)
        .map(|(_, row)| match kind {
            PenaltyKind::Entrywise => row.iter().map(|v| v.abs()).sum::<f64>(),
            PenaltyKind::RowGroup => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .sum()
}

/// `lambda * sum_r pi_r^gamma * ||beta_r||` for a `(d, m, k)` tensor.
pub fn value(beta: &Array3<f64>, pi: ArrayView1<f64>, cfg: &PenaltyConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return 0.0;
    }
    ordered_sum(
        (0..beta.dim().2).map(|r| cfg.weight(pi[r]) * block_norm(beta.index_axis(Axis(2), r), cfg.kind, cfg.exempt_row())),
    )
}

/// Proximal map of `threshold * ||.||` for the given norm.
pub fn prox(z: ArrayView2<f64>, threshold: f64, kind: PenaltyKind) -> Result<Array2<f64>> {
    if !(threshold >= 0.0) {
        return Err(HermitError::Domain(format!("negative prox threshold {threshold}")));
    }
    Ok(prox_exempt(z, threshold, kind, None))
}

/// Proximal map leaving row `exempt` untouched.
pub fn prox_exempt(z: ArrayView2<f64>, threshold: f64, kind: PenaltyKind, exempt: Option<usize>) -> Array2<f64> {
    let mut out = z.to_owned();
    if threshold == 0.0 {
        return out;
    }
    for (f, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if Some(f) == exempt {
            continue;
        }
        match kind {
            PenaltyKind::Entrywise => row.mapv_inplace(|v| soft_threshold(v, threshold)),
            PenaltyKind::RowGroup => {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= threshold {
                    row.fill(0.0);
                } else {
                    row *= 1.0 - threshold / norm;
                }
            }
        }
    }
    out
}

#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}
