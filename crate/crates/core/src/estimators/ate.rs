//! Doubly-robust average treatment effect with M-fold cross-fitting.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::Task;
use crate::error::{Error, Result};
use crate::estimators::cate::HeadSpec;
use crate::estimators::fit::{fit_head, predict, rows, FitMode, FitSettings};
use crate::metalearn::{features, HeadClass, MetaModel};
use crate::numerics::{Activation, MlpParams, Rng};

/// Default number of cross-fitting folds.
pub const DEFAULT_FOLDS: usize = 5;
/// Propensities are clamped into this interval before weighting.
pub const PROPENSITY_CLAMP: (f64, f64) = (0.02, 0.98);

/// Fold membership of each unit, assigned separately within each arm by a
/// seeded shuffle followed by round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossFitPlan {
    pub folds: usize,
    pub fold_of: Vec<usize>,
}

impl CrossFitPlan {
    pub fn new(treat: &[u8], folds: usize, rng: &mut Rng) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config(format!("cross-fitting needs at least 2 folds, got {folds}")));
        }
        let mut fold_of = vec![0; treat.len()];
        for arm in [1u8, 0] {
            let mut idx: Vec<usize> = (0..treat.len()).filter(|&i| treat[i] == arm).collect();
            if idx.len() < folds {
                return Err(Error::Estimation(format!(
                    "arm {arm} has {} units, too few for {folds} folds",
                    idx.len()
                )));
            }
            rng.shuffle(&mut idx);
            for (pos, &i) in idx.iter().enumerate() {
                fold_of[i] = pos % folds;
            }
        }
        Ok(Self { folds, fold_of })
    }

    /// Units of `arm` used to fit the model that predicts fold `fold`.
    pub fn training_units(&self, treat: &[u8], arm: u8, fold: usize) -> Vec<usize> {
        (0..treat.len()).filter(|&i| treat[i] == arm && self.fold_of[i] != fold).collect()
    }
}

/// Result of the doubly-robust estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub tau_hat: f64,
    /// Propensity used for each unit.
    pub p_hat: Vec<f64>,
    /// Per-unit terms whose mean is `tau_hat`.
    pub influence: Vec<f64>,
    pub n0: usize,
}

/// `τ̂ = mean[ I(Y − Ŷ₁)/p̂ − (1 − I)(Y − Ŷ₀)/(1 − p̂) + Ŷ₁ − Ŷ₀ ]`.
pub fn dr_estimate(
    treat: &[u8],
    y: ArrayView1<f64>,
    yhat1: ArrayView1<f64>,
    yhat0: ArrayView1<f64>,
    p_hat: ArrayView1<f64>,
) -> Result<AteReport> {
    let n = treat.len();
    if [y.len(), yhat1.len(), yhat0.len(), p_hat.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("DR inputs have inconsistent lengths".into()));
    }
    if n == 0 {
        return Err(Error::Estimation("no units".into()));
    }
    if let Some(p) = p_hat.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Estimation(format!("propensity {p} outside (0, 1)")));
    }
    let influence: Vec<f64> = (0..n)
        .map(|i| {
            let ind = f64::from(treat[i]);
            ind * (y[i] - yhat1[i]) / p_hat[i] - (1.0 - ind) * (y[i] - yhat0[i]) / (1.0 - p_hat[i]) + yhat1[i]
                - yhat0[i]
        })
        .collect();
    let tau_hat = influence.iter().sum::<f64>() / n as f64;
    Ok(AteReport { tau_hat, p_hat: p_hat.to_vec(), influence, n0: n })
}

/// Where the propensity `p̂` comes from.
#[derive(Debug, Clone, Copy)]
pub enum PropensityMode<'a> {
    /// The treated share `Σ I / n₀`.
    Empirical,
    /// A head fit on the features of a meta-learned propensity model:
    /// adapted from the meta head when `from_meta`, otherwise fresh.
    Learned { model: &'a MetaModel, settings: FitSettings, from_meta: bool },
    /// A fresh head of the given class fit on raw covariates.
    Direct { class: HeadClass, hidden: &'a [usize], settings: FitSettings },
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROPENSITY_CLAMP.0, PROPENSITY_CLAMP.1)
}

/// Per-unit propensities for a task.
pub fn propensities(task: &Task, mode: &PropensityMode<'_>, rng: &Rng) -> Result<Array1<f64>> {
    let n = task.n();
    let target: Array1<f64> = task.treat.iter().map(|&t| f64::from(t)).collect();
    match mode {
        PropensityMode::Empirical => {
            let p = target.sum() / n as f64;
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Estimation(format!("empirical propensity is {p}")));
            }
            Ok(Array1::from_elem(n, p))
        }
        PropensityMode::Learned { model, settings, from_meta } => {
            let h = model.encode(task.x.view())?;
            let start = if *from_meta { FitMode::FromMeta(&model.head) } else { FitMode::FromScratch };
            let head = fit_head(
                h.view(),
                target.view(),
                model.config.head_class,
                &model.config.head_hidden,
                Activation::Sigmoid,
                start,
                settings,
                &mut rng.derive("propensity"),
            )?;
            Ok(predict(&head, h.view())?.mapv(clamp))
        }
        PropensityMode::Direct { class, hidden, settings } => {
            let head = fit_head(
                task.x.view(),
                target.view(),
                *class,
                hidden,
                Activation::Sigmoid,
                FitMode::FromScratch,
                settings,
                &mut rng.derive("propensity"),
            )?;
            Ok(predict(&head, task.x.view())?.mapv(clamp))
        }
    }
}

/// Cross-fitted outcome predictions `(Ŷ₁, Ŷ₀)` for every unit: a unit in
/// fold `i` is predicted by heads fit on the other folds of each arm.
pub fn cross_fit_outcomes(
    task: &Task,
    encoder: Option<&MlpParams>,
    spec: &HeadSpec<'_>,
    plan: &CrossFitPlan,
    rng: &Rng,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = features(encoder, task.x.view())?;
    let n = task.n();
    let mut yhat = [Array1::zeros(n), Array1::zeros(n)];
    for fold in 0..plan.folds {
        let predict_units: Vec<usize> = (0..n).filter(|&i| plan.fold_of[i] == fold).collect();
        if predict_units.is_empty() {
            continue;
        }
        let hp = rows(&h, &predict_units);
        for arm in [0u8, 1] {
            let train = plan.training_units(&task.treat, arm, fold);
            if train.is_empty() {
                return Err(Error::Estimation(format!("fold {fold} leaves no arm-{arm} units to fit")));
            }
            debug_assert!(train.iter().all(|i| !predict_units.contains(i)));
            let head = fit_head(
                rows(&h, &train).view(),
                task.y.select(Axis(0), &train).view(),
                spec.class,
                &spec.hidden,
                Activation::Identity,
                spec.mode,
                &spec.settings,
                &mut rng.derive(&format!("crossfit/{fold}/{arm}")),
            )?;
            let pred = predict(&head, hp.view())?;
            for (&i, v) in predict_units.iter().zip(pred) {
                yhat[arm as usize][i] = v;
            }
        }
    }
    let [y0, y1] = yhat;
    Ok((y1, y0))
}

/// Doubly-robust cross-fitted ATE on a target task.
pub fn dr_ate(
    task: &Task,
    encoder: Option<&MlpParams>,
    spec: &HeadSpec<'_>,
    folds: usize,
    propensity: &PropensityMode<'_>,
    rng: &Rng,
) -> Result<AteReport> {
    let plan = CrossFitPlan::new(&task.treat, folds, &mut rng.derive("crossfit/plan"))?;
    let (y1, y0) = cross_fit_outcomes(task, encoder, spec, &plan, rng)?;
    let p = propensities(task, propensity, rng)?;
    dr_estimate(&task.treat, task.y.view(), y1.view(), y0.view(), p.view())
}

/// Features for the outcome models: the encoder's output, or raw covariates.
pub fn outcome_features(encoder: Option<&MlpParams>, x: ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
    features(encoder, x)
}
