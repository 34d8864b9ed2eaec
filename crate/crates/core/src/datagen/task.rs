//! Tasks (one experiment each), task sets and the synthetic task generator.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::truth::{
    assign_treatment, draw_covariates, gen_representation, GroundTruthPropensity, GroundTruthRep, Link,
    RepKind, TaskFunctionParams, TaskTruth, DEFAULT_NOISE_SD,
};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::numerics::Rng;

/// One experimental unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub i: u8,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y1: Array1<f64>,
    pub y0: Array1<f64>,
}

/// One experiment, stored column-wise: `x` has one row per unit.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub x: Array2<f64>,
    pub treat: Vec<u8>,
    pub y: Array1<f64>,
    pub potential: Option<PotentialOutcomes>,
    /// Observed-covariate mask shared by every unit (padded tasks only).
    pub mask: Option<Vec<u8>>,
    /// Covariate dimension before any padding.
    pub native_dim: usize,
    /// Simulation ground truth, when the task was generated here.
    pub truth: Option<TaskTruth>,
}

impl Task {
    pub fn new(id: usize, x: Array2<f64>, treat: Vec<u8>, y: Array1<f64>) -> Result<Self> {
        let n = x.nrows();
        if treat.len() != n || y.len() != n {
            return shape_err(format!("{n} covariate rows, {} indicators, {} outcomes", treat.len(), y.len()));
        }
        if treat.iter().any(|&t| t > 1) {
            return domain_err("treatment indicators must be 0 or 1");
        }
        let native_dim = x.ncols();
        Ok(Self { id, x, treat, y, potential: None, mask: None, native_dim, truth: None })
    }

    /// Attaches potential outcomes; the observed outcome must agree with them.
    pub fn with_potential(mut self, y1: Array1<f64>, y0: Array1<f64>) -> Result<Self> {
        if y1.len() != self.n() || y0.len() != self.n() {
            return shape_err("potential outcome length does not match the task");
        }
        for (i, &t) in self.treat.iter().enumerate() {
            let expected = if t == 1 { y1[i] } else { y0[i] };
            if expected.to_bits() != self.y[i].to_bits() {
                return Err(Error::Schema(format!("unit {i}: observed outcome disagrees with its potential outcome")));
            }
        }
        self.potential = Some(PotentialOutcomes { y1, y0 });
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.d() {
            return shape_err(format!("mask has length {}, covariates {}", mask.len(), self.d()));
        }
        if mask.iter().any(|&m| m > 1) {
            return domain_err("mask entries must be 0 or 1");
        }
        self.native_dim = mask.iter().filter(|&&m| m == 1).count();
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treat.iter().filter(|&&t| t == 1).count()
    }

    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treat[i] == arm).collect()
    }

    /// The units at `indices`, in that order; truth and mask are kept.
    pub fn subset(&self, indices: &[usize]) -> Task {
        Task {
            id: self.id,
            x: self.x.select(Axis(0), indices),
            treat: indices.iter().map(|&i| self.treat[i]).collect(),
            y: self.y.select(Axis(0), indices),
            potential: self.potential.as_ref().map(|p| PotentialOutcomes {
                y1: p.y1.select(Axis(0), indices),
                y0: p.y0.select(Axis(0), indices),
            }),
            mask: self.mask.clone(),
            native_dim: self.native_dim,
            truth: self.truth.clone(),
        }
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            x: self.x.row(i).to_vec(),
            i: self.treat[i],
            y: self.y[i],
            mask: self.mask.clone(),
            y1: self.potential.as_ref().map(|p| p.y1[i]),
            y0: self.potential.as_ref().map(|p| p.y0[i]),
        }
    }

    pub fn samples(&self) -> Vec<Sample> {
        (0..self.n()).map(|i| self.sample(i)).collect()
    }

    pub fn from_samples(id: usize, samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Shape("a task needs at least one sample".into()))?;
        let d = first.x.len();
        if samples.iter().any(|s| s.x.len() != d) {
            return shape_err("samples within a task must share their dimension");
        }
        let x = Array2::from_shape_fn((samples.len(), d), |(i, j)| samples[i].x[j]);
        let treat = samples.iter().map(|s| s.i).collect();
        let y = samples.iter().map(|s| s.y).collect();
        let mut task = Task::new(id, x, treat, y)?;
        let y1: Option<Vec<f64>> = samples.iter().map(|s| s.y1).collect();
        let y0: Option<Vec<f64>> = samples.iter().map(|s| s.y0).collect();
        if let (Some(y1), Some(y0)) = (y1, y0) {
            task = task.with_potential(y1.into(), y0.into())?;
        }
        if let Some(mask) = &first.mask {
            if samples.iter().any(|s| s.mask.as_ref() != Some(mask)) {
                return Err(Error::Schema("masks differ between samples of one task".into()));
            }
            task = task.with_mask(mask.clone())?;
        }
        Ok(task)
    }
}

/// K historical tasks plus the target task, all of dimension `d_max`.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    pub target: Task,
    pub d_max: usize,
}

impl TaskSet {
    pub fn new(tasks: Vec<Task>, target: Task) -> Result<Self> {
        if tasks.is_empty() {
            return domain_err("a task set needs at least one historical task");
        }
        let d_max = target.d();
        if tasks.iter().any(|t| t.d() != d_max) {
            return shape_err("all tasks in a set must share the covariate dimension");
        }
        Ok(Self { tasks, target, d_max })
    }
}

/// Simulates `n` units from known outcome functions and propensity.
pub fn gen_task_from_truth(id: usize, truth: TaskTruth, n: usize, rng: &Rng) -> Result<Task> {
    if n == 0 {
        return domain_err("a task needs at least one sample");
    }
    let d = truth.d();
    let x = draw_covariates(n, d, &mut rng.derive("x"));
    let (m1, m0) = truth.mean_outcomes(x.view())?;
    let mut noise1 = rng.derive("noise1");
    let mut noise0 = rng.derive("noise0");
    let y1 = m1.mapv(|m| m + noise1.normal(0.0, truth.arm1.noise_sd));
    let y0 = m0.mapv(|m| m + noise0.normal(0.0, truth.arm0.noise_sd));
    let treat = assign_treatment(&truth.propensity, x.view(), &mut rng.derive("treatment"))?;
    let y = Array1::from_shape_fn(n, |i| if treat[i] == 1 { y1[i] } else { y0[i] });
    let mut task = Task::new(id, x, treat, y)?.with_potential(y1, y0)?;
    task.truth = Some(truth);
    Ok(task)
}

/// Draws fresh outcome functions for both arms and simulates a task.
pub fn gen_task_with(
    id: usize,
    rep: Arc<GroundTruthRep>,
    prop: GroundTruthPropensity,
    n: usize,
    noise_sd: f64,
    link: Link,
    rng: &Rng,
) -> Result<Task> {
    if !(noise_sd >= 0.0) {
        return domain_err("noise standard deviation must be non-negative");
    }
    let r = rep.r();
    let arm1 = TaskFunctionParams::random(r, noise_sd, link, &mut rng.derive("arm1"));
    let arm0 = TaskFunctionParams::random(r, noise_sd, link, &mut rng.derive("arm0"));
    let truth = TaskTruth { rep, arm1, arm0, propensity: prop };
    gen_task_from_truth(id, truth, n, &rng.derive("units"))
}

/// Logistic task with the default noise level (variance 0.01).
pub fn gen_task(rep: Arc<GroundTruthRep>, prop: GroundTruthPropensity, n: usize, rng: &Rng) -> Result<Task> {
    gen_task_with(0, rep, prop, n, DEFAULT_NOISE_SD, Link::Logistic, rng)
}

/// How each task's treatment propensity is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PropensitySpec {
    /// The same probability for every task.
    Fixed { p: f64 },
    /// A probability drawn per task uniformly from `[lo, hi]`.
    UniformFixed { lo: f64, hi: f64 },
    /// A fresh random network per task.
    Neural,
}

impl Default for PropensitySpec {
    fn default() -> Self {
        PropensitySpec::Fixed { p: 0.5 }
    }
}

impl PropensitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PropensitySpec::Fixed { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::Config(format!("propensity p must lie in (0, 1), got {p}")))
            }
            PropensitySpec::UniformFixed { lo, hi } if !(lo > 0.0 && hi < 1.0 && lo <= hi) => {
                Err(Error::Config(format!("propensity range [{lo}, {hi}] must lie inside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn draw(&self, d: usize, rng: &mut Rng) -> Result<GroundTruthPropensity> {
        match *self {
            PropensitySpec::Fixed { p } => GroundTruthPropensity::fixed(p),
            PropensitySpec::UniformFixed { lo, hi } => GroundTruthPropensity::fixed(rng.uniform(lo, hi)),
            PropensitySpec::Neural => GroundTruthPropensity::random_network(d, rng),
        }
    }
}

/// Settings of the multi-task simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: RepKind,
    pub d: usize,
    pub r: usize,
    pub k: usize,
    pub n: usize,
    pub n_target: usize,
    pub propensity: PropensitySpec,
    pub noise_sd: f64,
    pub link: Link,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: RepKind::NeuralNetwork,
            d: 300,
            r: 50,
            k: 20,
            n: 1000,
            n_target: 1000,
            propensity: PropensitySpec::default(),
            noise_sd: DEFAULT_NOISE_SD,
            link: Link::Logistic,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.n == 0 || self.n_target == 0 {
            return Err(Error::Config("d, k, n and n_target must be positive".into()));
        }
        if self.kind != RepKind::FullVariables && (self.r == 0 || self.r > self.d) {
            return Err(Error::Config(format!("need 1 ≤ r ≤ d, got r = {} and d = {}", self.r, self.d)));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be non-negative".into()));
        }
        self.propensity.validate()
    }

    pub fn effective_r(&self) -> usize {
        if self.kind == RepKind::FullVariables {
            self.d
        } else {
            self.r
        }
    }

    /// Draws the shared representation for this configuration.
    pub fn draw_representation(&self, rng: &Rng) -> Result<Arc<GroundTruthRep>> {
        Ok(Arc::new(gen_representation(self.kind, self.d, self.r, &mut rng.derive("rep"))?))
    }

    /// One task of the family; `label` names its random stream.
    pub fn draw_task(&self, id: usize, rep: &Arc<GroundTruthRep>, n: usize, rng: &Rng) -> Result<Task> {
        let prop = self.propensity.draw(self.d, &mut rng.derive("propensity"))?;
        gen_task_with(id, rep.clone(), prop, n, self.noise_sd, self.link, rng)
    }
}

/// K historical tasks and a target task sharing one representation.
pub fn gen_taskset(cfg: &GeneratorConfig, rng: &Rng) -> Result<TaskSet> {
    cfg.validate()?;
    let rep = cfg.draw_representation(rng)?;
    let tasks = (0..cfg.k)
        .map(|k| cfg.draw_task(k + 1, &rep, cfg.n, &rng.derive_indexed("gen", k)))
        .collect::<Result<Vec<_>>>()?;
    let target = cfg.draw_task(0, &rep, cfg.n_target, &rng.derive("gen/target"))?;
    TaskSet::new(tasks, target)
}

/// Ground-truth effects of a simulated task.
#[derive(Debug, Clone)]
pub struct OracleEffects {
    /// Finite-sample effect `mean(y1 − y0)` over the task's units.
    pub ate: f64,
    /// Population effect `E[τ(X)]`, by Monte Carlo.
    pub population_ate: f64,
    /// Semiparametric variance bound
    /// `E[σ₁²/e(X) + σ₀²/(1 − e(X)) + (τ(X) − τ)²]`, by Monte Carlo.
    pub v_optimal: f64,
    pub truth: TaskTruth,
}

impl OracleEffects {
    pub fn cate(&self, x: &[f64]) -> Result<f64> {
        self.truth.cate(x)
    }
}

pub const ORACLE_DRAWS: usize = 100_000;

pub fn oracle_effects(task: &Task, n_draws: usize, rng: &Rng) -> Result<OracleEffects> {
    let po = task
        .potential
        .as_ref()
        .ok_or_else(|| Error::Unsupported("task has no potential outcomes".into()))?;
    let truth = task
        .truth
        .clone()
        .ok_or_else(|| Error::Unsupported("task has no simulation ground truth".into()))?;
    if n_draws == 0 {
        return domain_err("oracle needs at least one draw");
    }
    let ate = (&po.y1 - &po.y0).mean().unwrap_or(0.0);
    let mut draws = rng.derive("oracle");
    let chunk = 10_000;
    let (s1, s0) = (truth.arm1.noise_sd.powi(2), truth.arm0.noise_sd.powi(2));
    let mut taus = Vec::with_capacity(n_draws);
    let mut weight_terms = 0.0;
    let mut done = 0;
    while done < n_draws {
        let m = chunk.min(n_draws - done);
        let x = draw_covariates(m, truth.d(), &mut draws);
        taus.extend(truth.cate_batch(x.view())?);
        let e = truth.propensity.prob_batch(x.view())?;
        weight_terms += e.iter().map(|&p| s1 / p + s0 / (1.0 - p)).sum::<f64>();
        done += m;
    }
    let population_ate = taus.iter().sum::<f64>() / n_draws as f64;
    let heterogeneity = taus.iter().map(|t| (t - population_ate).powi(2)).sum::<f64>() / n_draws as f64;
    Ok(OracleEffects {
        ate,
        population_ate,
        v_optimal: weight_terms / n_draws as f64 + heterogeneity,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(r: usize) -> TaskFunctionParams {
        TaskFunctionParams { a: vec![0.0; r], b: 0.0, noise_sd: 0.0, link: Link::Logistic }
    }

    #[test]
    fn zero_function_gives_half() {
        let rep = Arc::new(GroundTruthRep::identity(3).unwrap());
        let truth = TaskTruth {
            rep,
            arm1: zero_params(3),
            arm0: zero_params(3),
            propensity: GroundTruthPropensity::fixed(0.5).unwrap(),
        };
        let task = gen_task_from_truth(0, truth, 50, &Rng::root(1)).unwrap();
        let po = task.potential.unwrap();
        assert!(po.y1.iter().chain(po.y0.iter()).all(|&v| v == 0.5));
    }

    #[test]
    fn logistic_effect_of_quarter() {
        let rep = Arc::new(GroundTruthRep::identity(1).unwrap());
        let truth = TaskTruth {
            rep,
            arm1: zero_params(1),
            arm0: TaskFunctionParams { a: vec![0.0], b: 3f64.ln(), noise_sd: 0.0, link: Link::Logistic },
            propensity: GroundTruthPropensity::fixed(0.5).unwrap(),
        };
        let task = gen_task_from_truth(0, truth, 5, &Rng::root(1)).unwrap();
        let po = task.potential.as_ref().unwrap();
        for i in 0..5 {
            assert_eq!(po.y1[i], 0.5);
            assert!((po.y0[i] - 0.25).abs() < 1e-15);
        }
        assert!((task.truth.as_ref().unwrap().cate(&[0.3]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn consistency_and_range() {
        let mut rng = Rng::root(5);
        let rep = Arc::new(gen_representation(RepKind::NeuralNetwork, 20, 5, &mut rng).unwrap());
        let task = gen_task(rep, GroundTruthPropensity::fixed(0.4).unwrap(), 300, &rng).unwrap();
        let po = task.potential.as_ref().unwrap();
        for i in 0..task.n() {
            let expect = if task.treat[i] == 1 { po.y1[i] } else { po.y0[i] };
            assert_eq!(task.y[i].to_bits(), expect.to_bits());
        }
        let truth = task.truth.as_ref().unwrap();
        let (m1, m0) = truth.mean_outcomes(task.x.view()).unwrap();
        assert!(m1.iter().chain(m0.iter()).all(|&v| v > 0.0 && v < 1.0));
        assert!(task.x.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn treated_fraction_matches_p() {
        let rep = Arc::new(GroundTruthRep::identity(1).unwrap());
        let task = gen_task(rep, GroundTruthPropensity::fixed(0.3).unwrap(), 100_000, &Rng::root(7)).unwrap();
        let frac = task.n_treated() as f64 / task.n() as f64;
        assert!((frac - 0.3).abs() < 0.005, "{frac}");
    }

    #[test]
    fn oracle_degenerate_cases() {
        let rep = Arc::new(GroundTruthRep::identity(2).unwrap());
        let same = TaskFunctionParams { a: vec![0.4, -0.7], b: 0.2, noise_sd: 0.0, link: Link::Logistic };
        let truth = TaskTruth {
            rep: rep.clone(),
            arm1: same.clone(),
            arm0: same.clone(),
            propensity: GroundTruthPropensity::fixed(0.37).unwrap(),
        };
        let task = gen_task_from_truth(0, truth, 100, &Rng::root(2)).unwrap();
        let o = oracle_effects(&task, ORACLE_DRAWS, &Rng::root(3)).unwrap();
        assert_eq!(o.ate, 0.0);
        assert_eq!(o.v_optimal, 0.0);
        assert_eq!(o.cate(&[0.5, 0.5]).unwrap(), 0.0);

        // Constant effect with a linear link.
        let lin = |b: f64| TaskFunctionParams { a: vec![1.0, 2.0], b, noise_sd: 0.0, link: Link::Linear };
        let truth = TaskTruth {
            rep: rep.clone(),
            arm1: lin(0.75),
            arm0: lin(0.5),
            propensity: GroundTruthPropensity::fixed(0.6).unwrap(),
        };
        let task = gen_task_from_truth(0, truth, 100, &Rng::root(2)).unwrap();
        let o = oracle_effects(&task, ORACLE_DRAWS, &Rng::root(3)).unwrap();
        assert!((o.ate - 0.25).abs() < 1e-12);
        assert!(o.v_optimal < 1e-20);

        // Homoscedastic noise, zero effect, p = 1/2.
        let noisy = TaskFunctionParams { noise_sd: 0.1, ..same };
        let truth = TaskTruth {
            rep,
            arm1: noisy.clone(),
            arm0: noisy,
            propensity: GroundTruthPropensity::fixed(0.5).unwrap(),
        };
        let task = gen_task_from_truth(0, truth, 100, &Rng::root(2)).unwrap();
        let o = oracle_effects(&task, ORACLE_DRAWS, &Rng::root(3)).unwrap();
        assert!((o.v_optimal - 0.04).abs() < 1e-12);
    }

    #[test]
    fn oracle_needs_potential_outcomes() {
        let task = Task::new(0, Array2::zeros((2, 1)), vec![0, 1], Array1::zeros(2)).unwrap();
        assert!(matches!(oracle_effects(&task, 10, &Rng::root(0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn treatment_ignores_potential_outcomes() {
        let mut rng = Rng::root(11);
        let rep = Arc::new(gen_representation(RepKind::LinearCombination, 6, 2, &mut rng).unwrap());
        let prop = GroundTruthPropensity::random_network(6, &mut rng).unwrap();
        let a = gen_task(rep.clone(), prop.clone(), 200, &Rng::root(12)).unwrap();
        // Same unit stream with different outcome functions.
        let mut truth = a.truth.clone().unwrap();
        truth.arm1.a.iter_mut().for_each(|v| *v = -*v);
        std::mem::swap(&mut truth.arm1, &mut truth.arm0);
        let b = gen_task_from_truth(0, truth, 200, &Rng::root(12).derive("units")).unwrap();
        assert_eq!(a.treat, b.treat);
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn sample_roundtrip() {
        let cfg = GeneratorConfig { d: 4, r: 2, k: 2, n: 30, n_target: 30, ..Default::default() };
        let set = gen_taskset(&cfg, &Rng::root(1)).unwrap();
        let t = &set.tasks[0];
        let back = Task::from_samples(t.id, &t.samples()).unwrap();
        assert_eq!(back.x, t.x);
        assert_eq!(back.treat, t.treat);
        assert_eq!(back.potential, t.potential);
    }

    #[test]
    fn taskset_is_seeded() {
        let cfg = GeneratorConfig { d: 10, r: 3, k: 3, n: 20, n_target: 15, ..Default::default() };
        let a = gen_taskset(&cfg, &Rng::root(9)).unwrap();
        let b = gen_taskset(&cfg, &Rng::root(9)).unwrap();
        assert_eq!(a.tasks.len(), 3);
        assert_eq!(a.target.n(), 15);
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.y, y.y);
        }
        assert_ne!(a.tasks[0].y, a.tasks[1].y);
    }
}
