//! Meta-learning configuration, sub-tasks and the trained meta model.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{Task, TaskSet};
use crate::error::{Error, Result};
use crate::numerics::{Activation, MlpParams, OptimizerKind, Rng};

/// Function class of the task heads `f_φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadClass {
    /// Affine map `s → 1`.
    Linear,
    /// Two hidden Tanh layers.
    TanhMlp,
}

/// How the outer gradient treats the inner adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Treat the adapted head `φ'` as a constant (first-order MAML).
    #[default]
    FirstOrder,
    /// Differentiate through the inner step by central finite differences.
    /// Only meant for tiny networks.
    SecondOrderFiniteDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Representation dimension.
    pub s: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub head_class: HeadClass,
    /// Inner adaptation rate `α_in`.
    pub inner_rate: f64,
    /// Outer head rate `α_out`.
    pub outer_rate_head: f64,
    /// Outer encoder rate `β_out`.
    pub outer_rate_encoder: f64,
    /// Sub-tasks per outer iteration.
    pub batch_tasks: usize,
    /// Points in each inner adaptation draw `D_i`; 0 skips the inner step.
    pub inner_shots: usize,
    /// Cap on the meta-update draw `D'_i`; `None` uses every point outside `D_i`.
    pub outer_shots: Option<usize>,
    pub meta_iters: usize,
    /// Gradient steps taken by [`adapt`](crate::metalearn::adapt).
    pub inner_steps_adapt: usize,
    /// Rate used by `adapt`; defaults to `inner_rate`.
    pub adapt_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub grad_mode: GradMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            s: 50,
            encoder_hidden: vec![128, 128, 128],
            head_hidden: vec![64, 64],
            head_class: HeadClass::TanhMlp,
            inner_rate: 0.01,
            outer_rate_head: 0.001,
            outer_rate_encoder: 0.001,
            batch_tasks: 8,
            inner_shots: 32,
            outer_shots: None,
            meta_iters: 5000,
            inner_steps_adapt: 10,
            adapt_rate: None,
            optimizer: OptimizerKind::Sgd,
            grad_mode: GradMode::FirstOrder,
        }
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::Config("representation dimension s must be at least 1".into()));
        }
        if self.batch_tasks == 0 {
            return Err(Error::Config("batch_tasks must be at least 1".into()));
        }
        if self.encoder_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.outer_shots == Some(0) {
            return Err(Error::Config("outer_shots must be positive when set".into()));
        }
        check_rate("inner_rate", self.inner_rate)?;
        check_rate("outer_rate_head", self.outer_rate_head)?;
        check_rate("outer_rate_encoder", self.outer_rate_encoder)?;
        if let Some(r) = self.adapt_rate {
            check_rate("adapt_rate", r)?;
        }
        Ok(())
    }

    pub fn adapt_rate(&self) -> f64 {
        self.adapt_rate.unwrap_or(self.inner_rate)
    }

    pub fn encoder_dims(&self, d: usize) -> Vec<usize> {
        std::iter::once(d).chain(self.encoder_hidden.iter().copied()).chain([self.s]).collect()
    }

    pub fn head_dims(&self) -> Vec<usize> {
        match self.head_class {
            HeadClass::Linear => vec![self.s, 1],
            HeadClass::TanhMlp => std::iter::once(self.s).chain(self.head_hidden.iter().copied()).chain([1]).collect(),
        }
    }

    pub fn head_activation(&self) -> Activation {
        match self.head_class {
            HeadClass::Linear => Activation::Identity,
            HeadClass::TanhMlp => Activation::Tanh,
        }
    }

    /// A randomly initialized head of this configuration's class.
    pub fn init_head(&self, output: Activation, rng: &mut Rng) -> Result<MlpParams> {
        MlpParams::init(&self.head_dims(), self.head_activation(), output, rng)
    }
}

/// The units of one arm of one task (or, for propensity learning, a whole
/// task with the treatment indicator as target).
#[derive(Debug, Clone)]
pub struct SubTask {
    pub parent: usize,
    /// `Some(l)` for arm `l`; `None` when the target is the indicator itself.
    pub arm: Option<u8>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl SubTask {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// The arm-`l` part of a task.
    pub fn from_arm(task: &Task, arm: u8) -> Self {
        let idx = task.arm_indices(arm);
        SubTask {
            parent: task.id,
            arm: Some(arm),
            x: task.x.select(ndarray::Axis(0), &idx),
            y: task.y.select(ndarray::Axis(0), &idx),
        }
    }

    /// The whole task with treatment indicators as targets.
    pub fn treatment_target(task: &Task) -> Self {
        SubTask {
            parent: task.id,
            arm: None,
            x: task.x.clone(),
            y: task.treat.iter().map(|&t| f64::from(t)).collect(),
        }
    }
}

/// Splits every task into its treated and control parts. Tasks with an
/// empty arm are dropped with a warning.
pub fn split_tasks(tasks: &[Task]) -> Vec<SubTask> {
    let mut out = Vec::with_capacity(2 * tasks.len());
    for task in tasks {
        let n1 = task.n_treated();
        if n1 == 0 || n1 == task.n() {
            log::warn!("task {} has a single arm ({n1} of {} treated); excluded from meta-training", task.id, task.n());
            continue;
        }
        out.push(SubTask::from_arm(task, 1));
        out.push(SubTask::from_arm(task, 0));
    }
    out
}

pub fn split_taskset(set: &TaskSet) -> Vec<SubTask> {
    split_tasks(&set.tasks)
}

/// `Σ (y − f(h(x)))²` over a batch.
pub fn task_loss(head: &MlpParams, encoder: &MlpParams, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if y.is_empty() {
        log::warn!("task_loss called on an empty batch");
        return Ok(0.0);
    }
    let h = encoder.forward_batch(x)?;
    head_loss(head, h.view(), y)
}

pub(crate) fn head_loss(head: &MlpParams, h: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if h.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} targets", h.nrows(), y.len())));
    }
    let pred = head.forward_batch(h)?;
    Ok(pred.column(0).iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum())
}

/// What a meta model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTarget {
    #[default]
    Outcome,
    Propensity,
}

/// Trained encoder `h_θ` and meta head `f_φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaModel {
    pub encoder: MlpParams,
    pub head: MlpParams,
    pub config: MetaConfig,
    pub seed: u64,
    #[serde(default)]
    pub target: ModelTarget,
}

impl MetaModel {
    pub fn new(encoder: MlpParams, head: MlpParams, config: MetaConfig, seed: u64, target: ModelTarget) -> Result<Self> {
        let model = Self { encoder, head, config, seed, target };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.output_dim() != self.head.input_dim() {
            return Err(Error::Shape(format!(
                "encoder outputs {} features but the head expects {}",
                self.encoder.output_dim(),
                self.head.input_dim()
            )));
        }
        if self.head.output_dim() != 1 {
            return Err(Error::Shape("the meta head must have a scalar output".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn s(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Learned representation `h_θ(x)` for each row.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.encoder.forward_batch(x)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let h = self.encode(x)?;
        Ok(self.head.forward_batch(h.view())?.column(0).to_owned())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: MetaModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
