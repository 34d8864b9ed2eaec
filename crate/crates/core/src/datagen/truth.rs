//! Ground-truth simulation components: the shared representation `h*`, the
//! per-arm outcome functions and the treatment propensity.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::numerics::linalg::cholesky_with_ridge;
use crate::numerics::{sigmoid, Activation, MlpParams, Rng};

/// Width of the hidden layer of a neural ground-truth representation.
pub const NN_REP_HIDDEN: usize = 64;
/// Hidden widths of a neural ground-truth propensity.
pub const NN_PROPENSITY_HIDDEN: [usize; 2] = [32, 32];
/// Propensities are kept inside this interval to guarantee overlap.
pub const PROPENSITY_CLAMP: (f64, f64) = (0.02, 0.98);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    #[serde(alias = "full")]
    FullVariables,
    #[serde(alias = "selection")]
    VariableSelection,
    #[serde(alias = "linear")]
    LinearCombination,
    #[serde(alias = "nn", alias = "neural")]
    NeuralNetwork,
}

impl RepKind {
    pub const ALL: [RepKind; 4] = [
        RepKind::FullVariables,
        RepKind::VariableSelection,
        RepKind::LinearCombination,
        RepKind::NeuralNetwork,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RepKind::FullVariables => "full_variables",
            RepKind::VariableSelection => "variable_selection",
            RepKind::LinearCombination => "linear_combination",
            RepKind::NeuralNetwork => "neural_network",
        }
    }
}

impl std::str::FromStr for RepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown generator kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepPayload {
    Identity,
    Selection(Vec<usize>),
    Linear(Array2<f64>),
    Network(MlpParams),
}

/// The shared representation `h*: R^d → R^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRep {
    kind: RepKind,
    d: usize,
    r: usize,
    payload: RepPayload,
}

impl GroundTruthRep {
    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return domain_err("dimension must be positive");
        }
        Ok(Self { kind: RepKind::FullVariables, d, r: d, payload: RepPayload::Identity })
    }

    pub fn selection(d: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.len() > d {
            return domain_err(format!("need 1 ≤ r ≤ d, got r = {} and d = {d}", indices.len()));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() || sorted.last().is_some_and(|&i| i >= d) {
            return domain_err("selection indices must be distinct and below d");
        }
        Ok(Self { kind: RepKind::VariableSelection, d, r: indices.len(), payload: RepPayload::Selection(indices) })
    }

    /// `h*(x) = W x` with `W` of shape `r × d`.
    pub fn linear(w: Array2<f64>) -> Result<Self> {
        let (r, d) = w.dim();
        if r == 0 || r > d {
            return domain_err(format!("need 1 ≤ r ≤ d, got r = {r} and d = {d}"));
        }
        Ok(Self { kind: RepKind::LinearCombination, d, r, payload: RepPayload::Linear(w) })
    }

    pub fn network(net: MlpParams) -> Result<Self> {
        let (d, r) = (net.input_dim(), net.output_dim());
        if r > d {
            return domain_err(format!("need r ≤ d, got r = {r} and d = {d}"));
        }
        Ok(Self { kind: RepKind::NeuralNetwork, d, r, payload: RepPayload::Network(net) })
    }

    pub fn kind(&self) -> RepKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn payload(&self) -> &RepPayload {
        &self.payload
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.eval_batch(row)?.into_raw_vec_and_offset().0)
    }

    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d {
            return shape_err(format!("covariates have {} columns, representation expects {}", x.ncols(), self.d));
        }
        Ok(match &self.payload {
            RepPayload::Identity => x.to_owned(),
            RepPayload::Selection(idx) => x.select(ndarray::Axis(1), idx),
            RepPayload::Linear(w) => x.dot(&w.t()),
            RepPayload::Network(net) => net.forward_batch(x)?,
        })
    }
}

/// Draws a random ground-truth representation of the requested kind.
/// `r` is ignored (forced to `d`) for [`RepKind::FullVariables`].
pub fn gen_representation(kind: RepKind, d: usize, r: usize, rng: &mut Rng) -> Result<GroundTruthRep> {
    if d == 0 {
        return domain_err("dimension must be positive");
    }
    if kind != RepKind::FullVariables && (r == 0 || r > d) {
        return domain_err(format!("need 1 ≤ r ≤ d, got r = {r} and d = {d}"));
    }
    match kind {
        RepKind::FullVariables => GroundTruthRep::identity(d),
        RepKind::VariableSelection => {
            let mut idx = rng.choose_distinct(d, r);
            idx.sort_unstable();
            GroundTruthRep::selection(d, idx)
        }
        RepKind::LinearCombination => {
            // Scaled so each output coordinate has the variance of one
            // covariate under the uniform law.
            let scale = (3.0 / d as f64).sqrt();
            loop {
                let w = Array2::from_shape_fn((r, d), |_| rng.uniform(-1.0, 1.0) * scale);
                let gram = w.dot(&w.t());
                if let Ok((_, 0.0)) = cholesky_with_ridge(gram.view()) {
                    return GroundTruthRep::linear(w);
                }
                log::debug!("regenerating rank-deficient linear representation");
            }
        }
        RepKind::NeuralNetwork => {
            let net = MlpParams::init(&[d, NN_REP_HIDDEN, r], Activation::Tanh, Activation::Identity, rng)?;
            GroundTruthRep::network(net)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// `1 / (1 + exp(aᵀh + b))`.
    #[default]
    Logistic,
    /// `aᵀh + b`, for well-specified linear experiments.
    Linear,
}

/// Outcome function of one arm of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFunctionParams {
    pub a: Vec<f64>,
    pub b: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub link: Link,
}

pub const DEFAULT_NOISE_SD: f64 = 0.1;

impl TaskFunctionParams {
    pub fn random(r: usize, noise_sd: f64, link: Link, rng: &mut Rng) -> Self {
        let a = (0..r).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b = rng.uniform(-1.0, 1.0);
        Self { a, b, noise_sd, link }
    }

    /// Noiseless mean outcome given the representation value.
    pub fn mean(&self, h: ArrayView1<f64>) -> f64 {
        let z = ArrayView1::from(&self.a[..]).dot(&h) + self.b;
        match self.link {
            Link::Logistic => sigmoid(-z),
            Link::Linear => z,
        }
    }

    pub fn mean_batch(&self, h: ArrayView2<f64>) -> Result<Array1<f64>> {
        if h.ncols() != self.a.len() {
            return shape_err(format!("representation has {} columns, coefficients {}", h.ncols(), self.a.len()));
        }
        let z = h.dot(&ArrayView1::from(&self.a[..])) + self.b;
        Ok(match self.link {
            Link::Logistic => z.mapv(|v| sigmoid(-v)),
            Link::Linear => z,
        })
    }
}

/// How treatment is assigned given covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthPropensity {
    FixedProbability { p: f64 },
    NeuralPropensity { net: MlpParams },
}

impl GroundTruthPropensity {
    pub fn fixed(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return domain_err(format!("treatment probability must lie in (0, 1), got {p}"));
        }
        Ok(Self::FixedProbability { p })
    }

    /// Random two-hidden-layer Tanh network with a Sigmoid output.
    pub fn random_network(d: usize, rng: &mut Rng) -> Result<Self> {
        let dims = [d, NN_PROPENSITY_HIDDEN[0], NN_PROPENSITY_HIDDEN[1], 1];
        let mut net = MlpParams::init(&dims, Activation::Tanh, Activation::Sigmoid, rng)?;
        // Random output bias so the average propensity varies between tasks.
        let last = net.num_layers() - 1;
        net.layer_mut(last).1[0] = rng.uniform(-1.0, 1.0);
        Ok(Self::NeuralPropensity { net })
    }

    pub fn prob_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            Self::FixedProbability { p } => Ok(Array1::from_elem(x.nrows(), *p)),
            Self::NeuralPropensity { net } => {
                let (lo, hi) = PROPENSITY_CLAMP;
                Ok(net.forward_batch(x)?.column(0).mapv(|v| lo + (hi - lo) * v))
            }
        }
    }
}

/// Draws treatment indicators from the propensity. Only `x` and the
/// dedicated stream enter the draw.
pub fn assign_treatment(prop: &GroundTruthPropensity, x: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<u8>> {
    let probs = prop.prob_batch(x)?;
    Ok(probs.iter().map(|&p| u8::from(rng.uniform(0.0, 1.0) < p)).collect())
}

/// Everything needed to simulate a task and evaluate its oracle effects.
#[derive(Debug, Clone)]
pub struct TaskTruth {
    pub rep: Arc<GroundTruthRep>,
    pub arm1: TaskFunctionParams,
    pub arm0: TaskFunctionParams,
    pub propensity: GroundTruthPropensity,
}

impl TaskTruth {
    pub fn mean_outcomes(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let h = self.rep.eval_batch(x)?;
        Ok((self.arm1.mean_batch(h.view())?, self.arm0.mean_batch(h.view())?))
    }

    /// True conditional effect `τ(x)` at each row.
    pub fn cate_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (m1, m0) = self.mean_outcomes(x)?;
        Ok(m1 - m0)
    }

    pub fn cate(&self, x: &[f64]) -> Result<f64> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.cate_batch(row)?[0])
    }

    pub fn d(&self) -> usize {
        self.rep.d()
    }
}

/// Covariates uniform on `[-1, 1]^d`.
pub fn draw_covariates(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.uniform(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_variables_is_identity() {
        let rep = gen_representation(RepKind::FullVariables, 4, 1, &mut Rng::root(0)).unwrap();
        assert_eq!(rep.r(), 4);
        assert_eq!(rep.eval(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selection_projects() {
        let rep = GroundTruthRep::selection(4, vec![0, 3]).unwrap();
        assert_eq!(rep.eval(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 4.0]);
        assert!(GroundTruthRep::selection(4, vec![0, 0]).is_err());
        assert!(GroundTruthRep::selection(4, vec![4]).is_err());
        let drawn = gen_representation(RepKind::VariableSelection, 30, 10, &mut Rng::root(2)).unwrap();
        match drawn.payload() {
            RepPayload::Selection(idx) => {
                assert_eq!(idx.len(), 10);
                assert!(idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < 30));
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn linear_matches_hand_product() {
        let w = array![[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let rep = GroundTruthRep::linear(w).unwrap();
        // [1*1 + 2*(-1) + 0.5*2, -1*1 + 0 + 3*2] = [0, 5]
        assert_eq!(rep.eval(&[1.0, -1.0, 2.0]).unwrap(), vec![0.0, 5.0]);
    }

    #[test]
    fn drawn_linear_has_full_row_rank() {
        let rep = gen_representation(RepKind::LinearCombination, 300, 50, &mut Rng::root(4)).unwrap();
        assert_eq!((rep.r(), rep.d()), (50, 300));
        let RepPayload::Linear(w) = rep.payload() else { panic!() };
        let (_, ridge) = cholesky_with_ridge(w.dot(&w.t()).view()).unwrap();
        assert_eq!(ridge, 0.0);
    }

    #[test]
    fn rejects_r_above_d() {
        assert!(gen_representation(RepKind::LinearCombination, 3, 4, &mut Rng::root(0)).is_err());
        assert!(gen_representation(RepKind::NeuralNetwork, 3, 0, &mut Rng::root(0)).is_err());
    }

    #[test]
    fn logistic_closed_forms() {
        let zero = TaskFunctionParams { a: vec![0.0; 3], b: 0.0, noise_sd: 0.0, link: Link::Logistic };
        assert_eq!(zero.mean(array![0.3, -0.2, 0.9].view()), 0.5);
        let ln3 = TaskFunctionParams { a: vec![0.0], b: 3f64.ln(), noise_sd: 0.0, link: Link::Logistic };
        assert!((ln3.mean(array![0.7].view()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn neural_propensity_respects_clamp() {
        let mut rng = Rng::root(8);
        let prop = GroundTruthPropensity::random_network(5, &mut rng).unwrap();
        let x = draw_covariates(500, 5, &mut rng) * 50.0;
        let p = prop.prob_batch(x.view()).unwrap();
        assert!(p.iter().all(|&v| (0.02..=0.98).contains(&v)));
    }

    #[test]
    fn parse_kind_aliases() {
        assert_eq!("nn".parse::<RepKind>().unwrap(), RepKind::NeuralNetwork);
        assert_eq!("full".parse::<RepKind>().unwrap(), RepKind::FullVariables);
        assert!("bogus".parse::<RepKind>().is_err());
    }
}
