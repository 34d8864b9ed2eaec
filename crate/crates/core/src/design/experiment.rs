//! Monte Carlo variance of the difference-in-means estimator under ReM and
//! complete randomization, and the asymptotic variance-reduction formulas.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::Task;
use crate::design::rem::{RemSampler, ThresholdMode};
use crate::error::{domain_err, Error, Result};
use crate::metalearn::MetaModel;
use crate::numerics::{chi2_cdf, chi2_inv, Rng};

/// Which covariates the design balances.
#[derive(Debug, Clone, Copy)]
pub enum Covariates<'a> {
    /// The task's observed covariates (masked-out padding columns dropped).
    Raw,
    /// The learned representation `h_θ̂(X)`.
    Representation(&'a MetaModel),
}

impl Covariates<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Covariates::Raw => "original",
            Covariates::Representation(_) => "representation",
        }
    }

    pub fn matrix(&self, task: &Task) -> Result<Array2<f64>> {
        match self {
            Covariates::Raw => Ok(observed_covariates(task)),
            Covariates::Representation(model) => model.encode(task.x.view()),
        }
    }
}

/// Covariates the task actually observes.
pub fn observed_covariates(task: &Task) -> Array2<f64> {
    match &task.mask {
        Some(mask) => {
            let cols: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == 1).collect();
            task.x.select(Axis(1), &cols)
        }
        None => task.x.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignExperimentReport {
    pub var_rem: f64,
    pub var_cr: f64,
    pub ratio: f64,
    pub reps: usize,
    /// Accepted / drawn candidates under ReM.
    pub accept_rate: f64,
    /// Complete randomizations behind `var_cr`.
    pub cr_draws: usize,
    pub threshold: f64,
    pub q: usize,
}

/// Settings of a variance-ratio experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSettings {
    pub p_a: f64,
    pub reps: usize,
    /// Treated fraction of the target units.
    pub rho: f64,
    pub threshold: ThresholdMode,
}

impl Default for DesignSettings {
    fn default() -> Self {
        Self { p_a: 0.01, reps: 2000, rho: 0.5, threshold: ThresholdMode::ChiSquare }
    }
}

impl DesignSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_a > 0.0 && self.p_a <= 1.0) {
            return Err(Error::Config(format!("p_a must lie in (0, 1], got {}", self.p_a)));
        }
        if self.reps < 100 {
            return Err(Error::Config(format!("reps must be at least 100, got {}", self.reps)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// `Var(τ̂)` under ReM on `z` relative to complete randomization, for the
/// task's potential outcomes. Every candidate drawn while rerandomizing is
/// itself a complete randomization, so all of them feed `var_cr`.
pub fn variance_ratio_on(task: &Task, z: ArrayView2<f64>, settings: &DesignSettings, rng: &Rng) -> Result<DesignExperimentReport> {
    settings.validate()?;
    let po = task
        .potential
        .as_ref()
        .ok_or_else(|| Error::Unsupported("variance experiments need potential outcomes".into()))?;
    let m = task.n();
    if z.nrows() != m {
        return Err(Error::Shape(format!("{} covariate rows for {m} units", z.nrows())));
    }
    let m1 = ((settings.rho * m as f64).round() as usize).clamp(2, m.saturating_sub(2));
    let sampler = RemSampler::new(z, m1)?;
    let a = sampler.threshold(settings.p_a, settings.threshold, &mut rng.derive("design/threshold"))?;
    let (y1, y0) = (&po.y1, &po.y0);
    let y0_total: f64 = y0.sum();
    let (fm1, fm0) = (m1 as f64, (m - m1) as f64);
    let estimate = |treated: &[usize]| {
        let (mut t1, mut t0) = (0.0, 0.0);
        for &i in treated {
            t1 += y1[i];
            t0 += y0[i];
        }
        t1 / fm1 - (y0_total - t0) / fm0
    };
    let mut rem = Vec::with_capacity(settings.reps);
    let mut cr = Vec::new();
    let mut draws = 0usize;
    for rep in 0..settings.reps {
        let mut r = rng.derive_indexed("design/rep", rep);
        let (treated, _, n) = sampler.sample_with(a, &mut r, |cand| cr.push(estimate(cand)))?;
        draws += n;
        rem.push(estimate(&treated));
    }
    let var_rem = sample_variance(&rem);
    let var_cr = sample_variance(&cr);
    Ok(DesignExperimentReport {
        var_rem,
        var_cr,
        ratio: var_rem / var_cr,
        reps: settings.reps,
        accept_rate: settings.reps as f64 / draws as f64,
        cr_draws: cr.len(),
        threshold: a,
        q: sampler.q(),
    })
}

pub fn variance_ratio_experiment(
    task: &Task,
    covariates: Covariates<'_>,
    settings: &DesignSettings,
    rng: &Rng,
) -> Result<DesignExperimentReport> {
    let z = covariates.matrix(task)?;
    variance_ratio_on(task, z.view(), settings, rng)
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return domain_err(format!("acceptance probability must lie in (0, 1), got {p}"));
    }
    Ok(())
}

/// `v_{q,a} = F_{χ²_{q+2}}(a) / F_{χ²_q}(a)`: the share of variance along
/// balanced directions that survives ReM.
pub fn v_factor(q: u32, a: f64) -> Result<f64> {
    Ok(chi2_cdf(a, q + 2)? / chi2_cdf(a, q)?)
}

/// `v_{s,a_s} / v_{d,a_d}` with each threshold at acceptance probability `p`.
pub fn theoretical_ratio(d: u32, s: u32, p: f64) -> Result<f64> {
    check_p(p)?;
    if s < 1 || s > d {
        return domain_err(format!("need 1 ≤ s ≤ d, got s = {s}, d = {d}"));
    }
    let num = chi2_cdf(chi2_inv(p, s)?, s + 2)?;
    let den = chi2_cdf(chi2_inv(p, d)?, d + 2)?;
    Ok(num / den)
}

/// `100 · R² · (1 − v_{q,a})` for each dimension `q`.
pub fn percent_variance_reduction(r2: f64, p_a: f64, dims: &[u32]) -> Result<Vec<(u32, f64)>> {
    if !(0.0..=1.0).contains(&r2) {
        return domain_err(format!("R² must lie in [0, 1], got {r2}"));
    }
    check_p(p_a)?;
    dims.iter()
        .map(|&q| {
            let a = chi2_inv(p_a, q)?;
            Ok((q, 100.0 * r2 * (1.0 - v_factor(q, a)?)))
        })
        .collect()
}

/// One result line of a design experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub generator: String,
    pub covariates_mode: String,
    pub s: usize,
    pub p_a: f64,
    pub reps: usize,
    pub var_rem: f64,
    pub var_cr: f64,
    pub ratio: f64,
    pub accept_rate: f64,
    pub seed: u64,
}

pub fn write_design_rows(rows: &[DesignRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_design_rows(path: &Path) -> Result<Vec<DesignRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub dim: u32,
    pub percent_reduction: f64,
}

pub fn write_curve(points: &[(u32, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &(dim, percent_reduction) in points {
        w.serialize(CurvePoint { dim, percent_reduction })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_dimensions_give_one() {
        for d in [1, 50, 500] {
            for p in [0.001, 0.01] {
                assert_eq!(theoretical_ratio(d, d, p).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn paper_value_of_the_ratio() {
        let r = theoretical_ratio(500, 20, 0.001).unwrap();
        assert!((r - 0.33).abs() < 0.005, "{r}");
    }

    #[test]
    fn ratio_grows_with_s() {
        let mut prev = 0.0;
        for s in (1..=100).step_by(3) {
            let r = theoretical_ratio(100, s, 0.01).unwrap();
            assert!(r >= prev && r > 0.0 && r <= 1.0);
            prev = r;
        }
    }

    #[test]
    fn curve_properties() {
        let dims: Vec<u32> = (2..=100).collect();
        let curve = percent_variance_reduction(0.5, 0.01, &dims).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 < w[0].1));
        // Reference values from an independent chi-squared implementation.
        assert!((curve[0].1 - 49.749_162_474_832_13).abs() < 1e-8);
        assert!((curve.last().unwrap().1 - 16.788_831_880_604_587).abs() < 1e-8);
        assert!(percent_variance_reduction(0.0, 0.01, &dims).unwrap().iter().all(|&(_, v)| v == 0.0));
        assert!(percent_variance_reduction(1.5, 0.01, &dims).is_err());
    }

    #[test]
    fn v_factor_two_ways() {
        // theoretical_ratio(d, s) = v_s / v_d, so v_s = ratio · v_d.
        let p = 0.01;
        let vd = v_factor(80, chi2_inv(p, 80).unwrap()).unwrap();
        let vs = v_factor(20, chi2_inv(p, 20).unwrap()).unwrap();
        assert!((theoretical_ratio(80, 20, p).unwrap() * vd - vs).abs() < 1e-12);
    }
}
