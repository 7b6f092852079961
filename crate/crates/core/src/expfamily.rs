//! Exponential-dispersion family primitives.
//!
//! Each target follows a density of the form
//! `exp{(y*eta - b(eta)) / a + c(y, a)}` with canonical link. Gaussian,
//! Bernoulli and Poisson targets are supported; the dispersion `a` is fixed
//! to 1 except for an optional per-task Gaussian variance override.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{HermitError, Result};

/// Natural parameters are clamped to this range before exponentiation in
/// Poisson density and mean evaluation.
pub const POISSON_NAT_CLAMP: f64 = 30.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl FamilyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyKind {
    type Err = HermitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(FamilyKind::Gaussian),
            "bernoulli" => Ok(FamilyKind::Bernoulli),
            "poisson" => Ok(FamilyKind::Poisson),
            other => Err(HermitError::InvalidConfig(format!("unknown family '{other}'"))),
        }
    }
}

/// A target distribution: family kind plus dispersion `a(phi)`.
///
/// Bernoulli and Poisson always carry dispersion 1. For Gaussian targets the
/// dispersion is the variance sigma^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Family {
    kind: FamilyKind,
    dispersion: f64,
}

impl Family {
    pub fn gaussian() -> Self {
        Family { kind: FamilyKind::Gaussian, dispersion: 1.0 }
    }

    /// Gaussian target with a fixed standard deviation `sigma`.
    pub fn gaussian_with_sigma(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(HermitError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Family { kind: FamilyKind::Gaussian, dispersion: sigma * sigma })
    }

    pub fn bernoulli() -> Self {
        Family { kind: FamilyKind::Bernoulli, dispersion: 1.0 }
    }

    pub fn poisson() -> Self {
        Family { kind: FamilyKind::Poisson, dispersion: 1.0 }
    }

    pub fn new(kind: FamilyKind) -> Self {
        Family { kind, dispersion: 1.0 }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }

    /// Whether `y` lies in the support of the family.
    pub fn in_support(&self, y: f64) -> bool {
        match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
        }
    }

    fn check(&self, y: f64, nat: f64) -> Result<()> {
        if !nat.is_finite() {
            return Err(HermitError::Domain(format!("non-finite natural parameter {nat}")));
        }
        if !self.in_support(y) {
            return Err(HermitError::Domain(format!("y = {y} outside {} support", self.kind)));
        }
        Ok(())
    }

    /// Cumulant function `b(eta)`.
    #[inline]
    pub fn cumulant(&self, nat: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * nat * nat,
            FamilyKind::Bernoulli => softplus(nat),
            FamilyKind::Poisson => nat.clamp(-POISSON_NAT_CLAMP, POISSON_NAT_CLAMP).exp(),
        }
    }

    /// Mean function `b'(eta)` without input validation.
    #[inline]
    pub fn mean_unchecked(&self, nat: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => nat,
            FamilyKind::Bernoulli => logistic(nat),
            FamilyKind::Poisson => nat.clamp(-POISSON_NAT_CLAMP, POISSON_NAT_CLAMP).exp(),
        }
    }

    /// Variance function `b''(eta)`.
    #[inline]
    pub fn variance_unchecked(&self, nat: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Bernoulli => {
                let p = logistic(nat);
                p * (1.0 - p)
            }
            FamilyKind::Poisson => nat.clamp(-POISSON_NAT_CLAMP, POISSON_NAT_CLAMP).exp(),
        }
    }

    /// Base measure `c(y, phi)`.
    #[inline]
    pub fn base_measure(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => -y * y / (2.0 * self.dispersion) - 0.5 * (LN_2PI + self.dispersion.ln()),
            FamilyKind::Bernoulli => 0.0,
            FamilyKind::Poisson => -ln_gamma(y + 1.0),
        }
    }

    /// `(b(eta) - y*eta) / a`: the negative log-density without the base
    /// measure. This is the per-entry loss minimized by the M-step.
    #[inline]
    pub fn neg_loglik_kernel(&self, y: f64, nat: f64) -> f64 {
        (self.cumulant(nat) - y * nat) / self.dispersion
    }

    /// `(b'(eta) - y) / a`.
    #[inline]
    pub fn grad_kernel(&self, y: f64, nat: f64) -> f64 {
        (self.mean_unchecked(nat) - y) / self.dispersion
    }

    /// `neg_loglik_kernel` and `grad_kernel` together, sharing the
    /// exponential.
    #[inline]
    pub fn kernel_and_grad(&self, y: f64, nat: f64) -> (f64, f64) {
        match self.kind {
            FamilyKind::Gaussian => ((0.5 * nat * nat - y * nat) / self.dispersion, (nat - y) / self.dispersion),
            FamilyKind::Bernoulli => {
                let e = (-nat.abs()).exp();
                let sp = nat.max(0.0) + e.ln_1p();
                let p = if nat >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (sp - y * nat, p - y)
            }
            FamilyKind::Poisson => {
                let mu = nat.clamp(-POISSON_NAT_CLAMP, POISSON_NAT_CLAMP).exp();
                (mu - y * nat, mu - y)
            }
        }
    }

    /// Log-density without validation; `base` must equal `base_measure(y)`.
    #[inline]
    pub fn log_density_with_base(&self, y: f64, nat: f64, base: f64) -> f64 {
        base - self.neg_loglik_kernel(y, nat)
    }

    pub fn log_density(&self, y: f64, nat: f64) -> Result<f64> {
        self.check(y, nat)?;
        Ok(self.log_density_with_base(y, nat, self.base_measure(y)))
    }

    pub fn mean(&self, nat: f64) -> Result<f64> {
        if !nat.is_finite() {
            return Err(HermitError::Domain(format!("non-finite natural parameter {nat}")));
        }
        Ok(self.mean_unchecked(nat))
    }

    /// `-d/d(eta) log f(y | eta)`.
    pub fn nll_grad_nat(&self, y: f64, nat: f64) -> Result<f64> {
        self.check(y, nat)?;
        Ok(self.grad_kernel(y, nat))
    }
}

impl Default for Family {
    fn default() -> Self {
        Family::gaussian()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

impl FromStr for Family {
    type Err = HermitError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Family::new(s.parse()?))
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.kind.as_str())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
