//! Meta-learned covariate representations for experimental design and
//! treatment-effect estimation.
//!
//! A shared encoder is trained across many historical experiments (split
//! into treated and control sub-tasks) with a first-order MAML procedure.
//! The learned low-dimensional features then drive rerandomized designs
//! (ReM) and CATE/ATE estimators for a new target experiment.

pub mod datagen;
pub mod design;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod metalearn;
pub mod numerics;

pub use error::{Error, Result};
