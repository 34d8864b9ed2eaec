//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights are stored `out × in`, so a batch `X` (`n × in`, one row per
//! sample) maps to `X · Wᵀ + b`. The hidden activation is shared by every
//! hidden layer; the last layer uses `output_activation`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative at pre-activation `pre`, given the already computed output.
    fn slope(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpParams {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    output_activation: Activation,
}

/// Intermediate values of a batched forward pass, kept for `backward_batch`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        domain_err(format!("{what} contains non-finite entries"))
    }
}

impl MlpParams {
    pub fn new(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() {
            return shape_err("network needs at least one layer");
        }
        if weights.len() != biases.len() {
            return shape_err(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            ));
        }
        if !matches!(output_activation, Activation::Identity | Activation::Sigmoid) {
            return Err(Error::Config(format!(
                "output activation must be identity or sigmoid, got {output_activation:?}"
            )));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() == 0 || w.ncols() == 0 {
                return shape_err(format!("layer {l} has an empty dimension"));
            }
            if w.nrows() != b.len() {
                return shape_err(format!(
                    "layer {l}: {} output rows but bias of length {}",
                    w.nrows(),
                    b.len()
                ));
            }
            if l > 0 && weights[l - 1].nrows() != w.ncols() {
                return shape_err(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    w.ncols(),
                    l - 1,
                    weights[l - 1].nrows()
                ));
            }
            check_finite(w.iter(), "weights")?;
            check_finite(b.iter(), "biases")?;
        }
        Ok(Self { weights, biases, activation, output_activation })
    }

    pub fn zeros(dims: &[usize], activation: Activation, output_activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return shape_err("layer_dims needs an input and an output dimension");
        }
        let weights = dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = dims[1..].iter().map(|&o| Array1::zeros(o)).collect();
        Self::new(weights, biases, activation, output_activation)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        dims: &[usize],
        activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut params = Self::zeros(dims, activation, output_activation)?;
        for w in &mut params.weights {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            w.mapv_inplace(|_| rng.uniform(-limit, limit));
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.weights[0].ncols())
            .chain(self.weights.iter().map(|w| w.nrows()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to one layer. Shapes cannot change through this.
    pub fn layer_mut(&mut self, l: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights[l], &mut self.biases[l])
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// All parameters, layer by layer: weights row-major, then the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return shape_err(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            ));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output_activation
        } else {
            self.activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return shape_err(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            ));
        }
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            let act = self.activation_of(l);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        if x.ncols() != self.input_dim() {
            return shape_err(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            ));
        }
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            let act = self.activation_of(l);
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(ForwardTrace { inputs, pre, output: h })
    }

    /// Vector-Jacobian product: gradients of a loss whose derivative with
    /// respect to the network output is `grad_out`. Also returns the
    /// derivative with respect to the input batch when `want_input_grad`.
    pub fn backward_batch(
        &self,
        trace: &ForwardTrace,
        grad_out: ArrayView2<f64>,
        want_input_grad: bool,
    ) -> Result<(GradientBundle, Option<Array2<f64>>)> {
        if grad_out.dim() != trace.output.dim() {
            return shape_err(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.dim(),
                trace.output.dim()
            ));
        }
        let n_layers = self.weights.len();
        let mut dw = vec![Array2::zeros((0, 0)); n_layers];
        let mut db = vec![Array1::zeros(0); n_layers];
        let mut grad = grad_out.to_owned();
        for l in (0..n_layers).rev() {
            let act = self.activation_of(l);
            let post = if l + 1 == n_layers { &trace.output } else { &trace.inputs[l + 1] };
            if act != Activation::Identity {
                Zip::from(&mut grad)
                    .and(&trace.pre[l])
                    .and(post)
                    .for_each(|g, &p, &o| *g *= act.slope(p, o));
            }
            dw[l] = grad.t().dot(&trace.inputs[l]);
            db[l] = grad.sum_axis(Axis(0));
            if l > 0 || want_input_grad {
                grad = grad.dot(&self.weights[l]);
            }
        }
        let input_grad = want_input_grad.then_some(grad);
        Ok((GradientBundle { weights: dw, biases: db }, input_grad))
    }

    /// Squared error `Σ‖f(x) − target‖²` of one sample and its gradient.
    pub fn backward(&self, x: &[f64], target: &[f64]) -> Result<(f64, GradientBundle)> {
        if target.len() != self.output_dim() {
            return shape_err(format!(
                "target has length {}, network output has {}",
                target.len(),
                self.output_dim()
            ));
        }
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let trace = self.forward_trace(batch)?;
        let resid: Array2<f64> = &trace.output - &ArrayView2::from_shape((1, target.len()), target).unwrap();
        let loss = resid.iter().map(|r| r * r).sum();
        let (grads, _) = self.backward_batch(&trace, (2.0 * &resid).view(), false)?;
        Ok((loss, grads))
    }

    /// Summed squared error of a scalar-output network over a batch.
    pub fn squared_error(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(f64, GradientBundle)> {
        if self.output_dim() != 1 {
            return shape_err("squared_error expects a scalar-output network");
        }
        if x.nrows() != y.len() {
            return shape_err(format!("{} inputs but {} targets", x.nrows(), y.len()));
        }
        let trace = self.forward_trace(x)?;
        let resid = trace.output.column(0).to_owned() - y;
        let loss = resid.dot(&resid);
        let grad_out = (2.0 * resid).insert_axis(Axis(1));
        let (grads, _) = self.backward_batch(&trace, grad_out.view(), false)?;
        Ok((loss, grads))
    }

    pub fn sgd_update(&mut self, grads: &GradientBundle, rate: f64) -> Result<()> {
        if rate < 0.0 || !rate.is_finite() {
            return domain_err(format!("learning rate must be finite and non-negative, got {rate}"));
        }
        grads.check_congruent(self)?;
        if rate == 0.0 {
            return Ok(());
        }
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-rate, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-rate, g);
        }
        Ok(())
    }
}

/// One SGD step, returning updated parameters and leaving the input untouched.
pub fn sgd_step(params: &MlpParams, grads: &GradientBundle, rate: f64) -> Result<MlpParams> {
    let mut next = params.clone();
    next.sgd_update(grads, rate)?;
    Ok(next)
}

/// Gradients with the same layout as an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn check_congruent(&self, params: &MlpParams) -> Result<()> {
        let ok = self.weights.len() == params.weights.len()
            && self.biases.len() == params.biases.len()
            && self.weights.iter().zip(&params.weights).all(|(g, w)| g.dim() == w.dim())
            && self.biases.iter().zip(&params.biases).all(|(g, b)| g.len() == b.len());
        if ok {
            Ok(())
        } else {
            shape_err("gradient bundle is not congruent with the parameters")
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// On-disk layout: dimensions, activations and row-major parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRecord {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<MlpParams> for MlpRecord {
    fn from(p: MlpParams) -> Self {
        MlpRecord {
            layer_dims: p.layer_dims(),
            activation: p.activation,
            output_activation: p.output_activation,
            weights: p.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpRecord> for MlpParams {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        if r.layer_dims.len() < 2 || r.weights.len() + 1 != r.layer_dims.len() {
            return Err(Error::Schema("layer_dims does not match the weight list".into()));
        }
        let weights = r
            .weights
            .into_iter()
            .enumerate()
            .map(|(l, flat)| {
                Array2::from_shape_vec((r.layer_dims[l + 1], r.layer_dims[l]), flat)
                    .map_err(|e| Error::Schema(format!("layer {l} weights: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = r.biases.into_iter().map(Array1::from).collect();
        MlpParams::new(weights, biases, r.activation, r.output_activation)
    }
}
