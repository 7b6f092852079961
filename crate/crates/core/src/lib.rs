//! Penalized finite-mixture regression for multivariate targets of mixed
//! type (Gaussian, Bernoulli, Poisson) with missing entries.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod expfamily;
pub mod io;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod penalty;
pub mod robust;
pub mod solver;
pub mod taskdiag;
pub mod util;

pub use error::{HermitError, Result};
pub use expfamily::{Family, FamilyKind};
pub use model::{Dataset, MixtureModel, ResponsibilityMatrix};
pub use penalty::{PenaltyConfig, PenaltyKind};
pub use solver::{fit, FitConfig, FitReport};
