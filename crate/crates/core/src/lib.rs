//! Likelihood-ratio tests of marginal homogeneity for unordered paired
//! observations under a bivariate normal model.
//!
//! Each observation is the pair `(min(X1, X2), max(X1, X2))` of a latent
//! bivariate normal vector. The crate fits the model under six nested
//! constraint regimes, forms four likelihood-ratio statistics, and calibrates
//! them against their limiting null laws with finite-sample adjustments.

pub mod calibration;
pub mod error;
pub mod estimation;
pub mod model;
pub mod nulldist;
pub mod optim;
pub mod quadrature;
pub mod seed;
pub mod sim;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use estimation::{closed_form_null, fit, fit_with_hints, Constraint, FitOptions, FitResult};
pub use model::{
    decomposed_log_likelihood, from_reparam, log_likelihood, pair_log_density, to_reparam, ReparamTheta,
    Theta, UnorderedDataset, UnorderedPair,
};
pub use nulldist::{AdjustmentCoefficients, AdjustmentSet, ChiBarMix, RLaw, RStarLaw, TestId};
pub use stats::{run_all, TestReport};
