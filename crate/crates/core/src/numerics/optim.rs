//! First-order optimizers over [`MlpParams`].

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::numerics::mlp::{GradientBundle, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed rate.
    #[default]
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) moments.
    Adam,
}

/// Stateful optimizer for one parameter set.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &MlpParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zeros = GradientBundle::zeros_like(params);
                Optimizer::Adam(AdamState {
                    step: 0,
                    m_w: zeros.weights.clone(),
                    v_w: zeros.weights,
                    m_b: zeros.biases.clone(),
                    v_b: zeros.biases,
                })
            }
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &GradientBundle, rate: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => params.sgd_update(grads, rate),
            Optimizer::Adam(state) => {
                if rate < 0.0 || !rate.is_finite() {
                    return domain_err(format!("learning rate must be finite and non-negative, got {rate}"));
                }
                grads.check_congruent(params)?;
                state.step += 1;
                let t = state.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for l in 0..params.num_layers() {
                    let (w, b) = params.layer_mut(l);
                    adam_update(w.iter_mut(), grads.weights[l].iter(), state.m_w[l].iter_mut(), state.v_w[l].iter_mut(), rate, c1, c2);
                    adam_update(b.iter_mut(), grads.biases[l].iter(), state.m_b[l].iter_mut(), state.v_b[l].iter_mut(), rate, c1, c2);
                }
                Ok(())
            }
        }
    }
}

fn adam_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    rate: f64,
    c1: f64,
    c2: f64,
) {
    for (((p, &g), m), v) in params.zip(grads).zip(m).zip(v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}
