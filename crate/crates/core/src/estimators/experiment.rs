//! Shot-count experiments: repeated small target samples, estimates from
//! several methods on the same samples, raw rows and aggregated MSE tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{draw_covariates, gen_task_from_truth, Task, TaskTruth};
use crate::error::{Error, Result};
use crate::estimators::ate::{dr_ate, PropensityMode};
use crate::estimators::cate::{cate_mse_on, fit_cate, HeadSpec};
use crate::numerics::{MlpParams, Rng};

/// One estimator to compare: outcome features, head fitting and propensity.
#[derive(Debug, Clone)]
pub struct AteMethod<'a> {
    pub name: String,
    pub encoder: Option<&'a MlpParams>,
    pub spec: HeadSpec<'a>,
    pub propensity: PropensityMode<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotExperiment {
    pub shots: Vec<usize>,
    pub repeats: usize,
    pub folds: usize,
}

impl Default for ShotExperiment {
    fn default() -> Self {
        Self { shots: vec![50, 100, 200, 500, 1000], repeats: 10, folds: 5 }
    }
}

impl ShotExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be a non-empty list of positive counts".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-repeat result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteRow {
    pub protocol: String,
    pub method: String,
    pub shots: usize,
    pub repeat: usize,
    pub estimate: f64,
    pub true_value: f64,
    pub sq_error: f64,
    pub seed: u64,
}

/// Mean squared error per (protocol, method, shots) with a normal 95%
/// half-width over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteAggregate {
    pub protocol: String,
    pub method: String,
    pub shots: usize,
    pub mse: f64,
    pub ci95_halfwidth: f64,
}

/// A target sample of `shots` units in which both arms can be split into
/// `min_per_arm` folds. Samples failing that are redrawn on the next stream.
fn draw_target(truth: &TaskTruth, shots: usize, min_per_arm: usize, rng: &Rng) -> Result<Task> {
    for attempt in 0..1000 {
        let task = gen_task_from_truth(0, truth.clone(), shots, &rng.derive_indexed("attempt", attempt))?;
        let n1 = task.n_treated();
        if n1 >= min_per_arm && shots - n1 >= min_per_arm {
            if attempt > 0 {
                log::debug!("redrew a {shots}-unit target sample {attempt} times for arm sizes");
            }
            return Ok(task);
        }
    }
    Err(Error::Estimation(format!("could not draw {shots} units with {min_per_arm} per arm")))
}

/// DR ATE squared error for each method, shot count and repeat.
pub fn ate_mse_experiment(
    protocol: &str,
    truth: &TaskTruth,
    true_value: f64,
    methods: &[AteMethod<'_>],
    exp: &ShotExperiment,
    seed: u64,
    rng: &Rng,
) -> Result<Vec<AteRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &shots in &exp.shots {
        for repeat in 0..exp.repeats {
            let stream = rng.derive(&format!("ate/shots/{shots}")).derive_indexed("rep", repeat);
            let sample = draw_target(truth, shots, exp.folds, &stream)?;
            for method in methods {
                let report = dr_ate(&sample, method.encoder, &method.spec, exp.folds, &method.propensity, &stream.derive(&method.name))?;
                rows.push(AteRow {
                    protocol: protocol.to_string(),
                    method: method.name.clone(),
                    shots,
                    repeat,
                    estimate: report.tau_hat,
                    true_value,
                    sq_error: (report.tau_hat - true_value).powi(2),
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

/// One CATE estimator to compare.
#[derive(Debug, Clone)]
pub struct CateMethod<'a> {
    pub name: String,
    pub encoder: Option<&'a MlpParams>,
    pub spec: HeadSpec<'a>,
}

/// CATE mean squared error, stored in the ATE row layout with
/// `estimate = sq_error = MSE` and `true_value = 0`.
pub fn cate_mse_experiment(
    protocol: &str,
    truth: &TaskTruth,
    methods: &[CateMethod<'_>],
    exp: &ShotExperiment,
    n_eval: usize,
    seed: u64,
    rng: &Rng,
) -> Result<Vec<AteRow>> {
    exp.validate()?;
    let x_eval = draw_covariates(n_eval, truth.d(), &mut rng.derive("cate/eval"));
    let tau_eval = truth.cate_batch(x_eval.view())?;
    let mut rows = Vec::new();
    for &shots in &exp.shots {
        for repeat in 0..exp.repeats {
            let stream = rng.derive(&format!("cate/shots/{shots}")).derive_indexed("rep", repeat);
            let sample = draw_target(truth, shots, 2, &stream)?;
            for method in methods {
                let model = fit_cate(&sample, method.encoder, &method.spec, &stream.derive(&method.name))?;
                let mse = cate_mse_on(&model, x_eval.view(), tau_eval.view())?;
                rows.push(AteRow {
                    protocol: protocol.to_string(),
                    method: method.name.clone(),
                    shots,
                    repeat,
                    estimate: mse,
                    true_value: 0.0,
                    sq_error: mse,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Groups rows by (protocol, method, shots) in order of first appearance.
pub fn aggregate_rows(rows: &[AteRow]) -> Vec<AteAggregate> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in rows {
        let key = (r.protocol.clone(), r.method.clone(), r.shots);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(protocol, method, shots)| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.protocol == protocol && r.method == method && r.shots == shots)
                .map(|r| r.sq_error)
                .collect();
            let n = errs.len() as f64;
            let mse = errs.iter().sum::<f64>() / n;
            let sd = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AteAggregate { protocol, method, shots, mse, ci95_halfwidth: 1.96 * sd / n.sqrt() }
        })
        .collect()
}

pub fn write_ate_rows(rows: &[AteRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ate_rows(path: &Path) -> Result<Vec<AteRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_aggregate(rows: &[AteAggregate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AteAggregate>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
