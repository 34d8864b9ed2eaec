//! Conditional treatment effects from arm-wise heads on a shared encoder.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::datagen::{draw_covariates, Task, TaskTruth};
use crate::error::{Error, Result};
use crate::estimators::fit::{fit_head, predict, rows, FitMode, FitSettings};
use crate::metalearn::{features, HeadClass};
use crate::numerics::{Activation, MlpParams, Rng};

/// `τ̂(x) = f̂₁(h(x)) − f̂₀(h(x))`. Without an encoder the heads act on raw
/// covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CateModel {
    pub encoder: Option<MlpParams>,
    pub head1: MlpParams,
    pub head0: MlpParams,
    pub head_class: HeadClass,
}

impl CateModel {
    pub fn predict_arms(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let h = features(self.encoder.as_ref(), x)?;
        Ok((predict(&self.head1, h.view())?, predict(&self.head0, h.view())?))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (m1, m0) = self.predict_arms(x)?;
        Ok(m1 - m0)
    }
}

/// Options shared by CATE and ATE head fits.
#[derive(Debug, Clone)]
pub struct HeadSpec<'a> {
    pub class: HeadClass,
    pub hidden: Vec<usize>,
    pub mode: FitMode<'a>,
    pub settings: FitSettings,
}

/// Fits one head per arm on the target task's data.
pub fn fit_cate(task: &Task, encoder: Option<&MlpParams>, spec: &HeadSpec<'_>, rng: &Rng) -> Result<CateModel> {
    let idx1 = task.arm_indices(1);
    let idx0 = task.arm_indices(0);
    if idx1.is_empty() || idx0.is_empty() {
        return Err(Error::Estimation(format!(
            "target task needs both arms ({} treated, {} control)",
            idx1.len(),
            idx0.len()
        )));
    }
    let h = features(encoder, task.x.view())?;
    let fit = |idx: &[usize], label: &str| -> Result<MlpParams> {
        let hy = rows(&h, idx);
        let y = task.y.select(ndarray::Axis(0), idx);
        fit_head(hy.view(), y.view(), spec.class, &spec.hidden, Activation::Identity, spec.mode, &spec.settings, &mut rng.derive(label))
    };
    Ok(CateModel {
        encoder: encoder.cloned(),
        head1: fit(&idx1, "cate/arm1")?,
        head0: fit(&idx0, "cate/arm0")?,
        head_class: spec.class,
    })
}

/// Mean squared CATE error on given points with known effects.
pub fn cate_mse_on(model: &CateModel, x: ArrayView2<f64>, tau: ArrayView1<f64>) -> Result<f64> {
    let est = model.predict(x)?;
    if est.len() != tau.len() {
        return Err(Error::Shape("effect vector does not match the evaluation points".into()));
    }
    Ok(est.iter().zip(tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau.len().max(1) as f64)
}

/// Mean squared CATE error over `n_eval` fresh covariate draws.
pub fn cate_mse(model: &CateModel, truth: &TaskTruth, n_eval: usize, rng: &Rng) -> Result<f64> {
    let x = draw_covariates(n_eval, truth.d(), &mut rng.derive("cate/eval"));
    let tau = truth.cate_batch(x.view())?;
    cate_mse_on(model, x.view(), tau.view())
}
