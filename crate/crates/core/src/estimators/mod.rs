//! Treatment-effect estimation on learned or raw covariates: arm-wise CATE
//! heads and the cross-fitted doubly-robust ATE.

pub mod ate;
pub mod cate;
pub mod experiment;
pub mod fit;

pub use ate::{
    cross_fit_outcomes, dr_ate, dr_estimate, propensities, AteReport, CrossFitPlan, PropensityMode, DEFAULT_FOLDS,
    PROPENSITY_CLAMP,
};
pub use cate::{cate_mse, cate_mse_on, fit_cate, CateModel, HeadSpec};
pub use experiment::{
    aggregate_rows, ate_mse_experiment, cate_mse_experiment, read_aggregate, read_ate_rows, write_aggregate,
    write_ate_rows, AteAggregate, AteMethod, AteRow, CateMethod, ShotExperiment,
};
pub use fit::{descend, fit_head, fit_linear_head, head_dims, FitMode, FitSettings};
