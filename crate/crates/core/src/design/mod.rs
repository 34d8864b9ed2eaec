//! Rerandomized experimental design on raw or learned covariates.

pub mod experiment;
pub mod rem;

pub use experiment::{
    observed_covariates, percent_variance_reduction, read_design_rows, theoretical_ratio, v_factor,
    variance_ratio_experiment, variance_ratio_on, write_curve, write_design_rows, Covariates, DesignExperimentReport,
    DesignRow, DesignSettings,
};
pub use rem::{diff_in_means, mahalanobis, rem_sample, threshold, Assignment, BalanceStat, RemSampler, ThresholdMode, MAX_DRAWS};
