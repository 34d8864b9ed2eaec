//! Fitting task heads on fixed features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metalearn::HeadClass;
use crate::numerics::linalg::least_squares;
use crate::numerics::{Activation, MlpParams, Optimizer, OptimizerKind, Rng};

/// Optimizer settings for non-linear heads. Gradient steps use the mean
/// squared error, which has the same minimizer as the summed loss but a
/// step size that does not depend on the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub steps: usize,
    pub rate: f64,
    /// Stop once one step improves the loss by less than this.
    pub tol: f64,
    pub optimizer: OptimizerKind,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { steps: 2000, rate: 0.01, tol: 1e-10, optimizer: OptimizerKind::Sgd }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) || !(self.tol >= 0.0) {
            return Err(Error::Config("fit rate and tolerance must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Starting point for a head fit.
#[derive(Debug, Clone, Copy)]
pub enum FitMode<'a> {
    /// Start from a meta-learned head.
    FromMeta(&'a MlpParams),
    /// Start from a fresh random head.
    FromScratch,
}

/// Heads used with raw covariates or a representation of width `input`.
pub fn head_dims(class: HeadClass, input: usize, hidden: &[usize]) -> Vec<usize> {
    match class {
        HeadClass::Linear => vec![input, 1],
        HeadClass::TanhMlp => std::iter::once(input).chain(hidden.iter().copied()).chain([1]).collect(),
    }
}

/// Exact least-squares affine head.
pub fn fit_linear_head(h: ArrayView2<f64>, y: ArrayView1<f64>, output: Activation) -> Result<MlpParams> {
    let (coef, intercept) = least_squares(h, y, 0.0)?;
    let w = coef.insert_axis(ndarray::Axis(0));
    MlpParams::new(vec![w], vec![Array1::from_elem(1, intercept)], Activation::Identity, output)
}

/// Full-batch descent on the mean squared error from `start`.
pub fn descend(start: &MlpParams, h: ArrayView2<f64>, y: ArrayView1<f64>, settings: &FitSettings) -> Result<MlpParams> {
    settings.validate()?;
    if y.is_empty() {
        return Err(Error::Estimation("cannot fit a head on zero samples".into()));
    }
    let n = y.len() as f64;
    let mut head = start.clone();
    let mut opt = Optimizer::new(settings.optimizer, &head);
    let mut prev = f64::INFINITY;
    for _ in 0..settings.steps {
        let (loss, mut g) = head.squared_error(h, y)?;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: 0, loss });
        }
        if prev - loss < settings.tol && prev.is_finite() && settings.optimizer == OptimizerKind::Sgd {
            break;
        }
        prev = loss;
        g.scale(1.0 / n);
        opt.step(&mut head, &g, settings.rate)?;
    }
    if !head.is_finite() {
        return Err(Error::Divergence { iteration: settings.steps, loss: f64::INFINITY });
    }
    Ok(head)
}

/// Minimizes the squared loss of a head on features `h`.
#[allow(clippy::too_many_arguments)]
pub fn fit_head(
    h: ArrayView2<f64>,
    y: ArrayView1<f64>,
    class: HeadClass,
    hidden: &[usize],
    output: Activation,
    mode: FitMode<'_>,
    settings: &FitSettings,
    rng: &mut Rng,
) -> Result<MlpParams> {
    if h.nrows() != y.len() {
        return Err(Error::Shape(format!("{} feature rows but {} targets", h.nrows(), y.len())));
    }
    if class == HeadClass::Linear && output == Activation::Identity {
        return fit_linear_head(h, y, output);
    }
    let start = match mode {
        FitMode::FromMeta(head) => {
            if head.input_dim() != h.ncols() {
                return Err(Error::Shape(format!(
                    "meta head expects {} features, got {}",
                    head.input_dim(),
                    h.ncols()
                )));
            }
            head.clone()
        }
        FitMode::FromScratch => {
            let act = match class {
                HeadClass::Linear => Activation::Identity,
                HeadClass::TanhMlp => Activation::Tanh,
            };
            MlpParams::init(&head_dims(class, h.ncols(), hidden), act, output, rng)?
        }
    };
    descend(&start, h, y, settings)
}

pub(crate) fn predict(head: &MlpParams, h: ArrayView2<f64>) -> Result<Array1<f64>> {
    Ok(head.forward_batch(h)?.column(0).to_owned())
}

pub(crate) fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), idx)
}
