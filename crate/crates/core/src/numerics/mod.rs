//! Numerical substrate: networks, optimizers, chi-squared functions,
//! linear algebra and deterministic random streams.

pub mod chi2;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use chi2::{chi2_cdf, chi2_inv, chi2_sf};
pub use mlp::{sgd_step, sigmoid, Activation, ForwardTrace, GradientBundle, MlpParams};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::Rng;
