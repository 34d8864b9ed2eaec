//! MAML training of the shared encoder and meta head, and head adaptation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::datagen::TaskSet;
use crate::error::{Error, Result};
use crate::metalearn::model::{
    head_loss, split_tasks, task_loss, GradMode, MetaConfig, MetaModel, ModelTarget, SubTask,
};
use crate::numerics::{Activation, GradientBundle, MlpParams, Optimizer, Rng};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Indices of the inner draw `D_i` and the meta-update draw `D'_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnerSplit {
    pub inner: Vec<usize>,
    pub outer: Vec<usize>,
}

impl InnerSplit {
    /// Random disjoint draws. `D_i` never takes the last point, so `D'_i`
    /// is never empty.
    pub fn draw(n: usize, inner_shots: usize, outer_shots: Option<usize>, rng: &mut Rng) -> Self {
        let k = inner_shots.min(n.saturating_sub(1));
        let perm = rng.permutation(n);
        let inner = perm[..k].to_vec();
        let rest = &perm[k..];
        let take = outer_shots.map_or(rest.len(), |c| c.min(rest.len()));
        InnerSplit { inner, outer: rest[..take].to_vec() }
    }
}

/// Gradient of `Σ (y − f(h))²` with respect to the head, for fixed features.
fn head_gradient(head: &MlpParams, h: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(f64, GradientBundle)> {
    head.squared_error(h, y)
}

/// `φ' = φ − α ∇_φ L(f_φ∘h, D)` for already-encoded `D`.
fn inner_step(head: &MlpParams, h: ArrayView2<f64>, y: ArrayView1<f64>, rate: f64) -> Result<MlpParams> {
    if y.is_empty() || rate == 0.0 {
        return Ok(head.clone());
    }
    let (_, g) = head_gradient(head, h, y)?;
    let mut adapted = head.clone();
    adapted.sgd_update(&g, rate)?;
    Ok(adapted)
}

/// Post-adaptation loss `L(f_{φ'}∘h_θ, D')` for one sub-task and split.
pub fn post_adaptation_loss(
    encoder: &MlpParams,
    head: &MlpParams,
    sub: &SubTask,
    split: &InnerSplit,
    inner_rate: f64,
) -> Result<f64> {
    let xi = sub.x.select(Axis(0), &split.inner);
    let yi = sub.y.select(Axis(0), &split.inner);
    let adapted = if split.inner.is_empty() {
        head.clone()
    } else {
        let hi = encoder.forward_batch(xi.view())?;
        inner_step(head, hi.view(), yi.view(), inner_rate)?
    };
    let xo = sub.x.select(Axis(0), &split.outer);
    let yo = sub.y.select(Axis(0), &split.outer);
    task_loss(&adapted, encoder, xo.view(), yo.view())
}

/// Outer gradients `(loss, ∇_θ, ∇_φ)` of one sub-task's post-adaptation loss.
pub fn outer_gradients(
    encoder: &MlpParams,
    head: &MlpParams,
    sub: &SubTask,
    split: &InnerSplit,
    inner_rate: f64,
    mode: GradMode,
) -> Result<(f64, GradientBundle, GradientBundle)> {
    match mode {
        GradMode::FirstOrder => first_order_gradients(encoder, head, sub, split, inner_rate),
        GradMode::SecondOrderFiniteDiff => finite_difference_gradients(encoder, head, sub, split, inner_rate),
    }
}

fn first_order_gradients(
    encoder: &MlpParams,
    head: &MlpParams,
    sub: &SubTask,
    split: &InnerSplit,
    inner_rate: f64,
) -> Result<(f64, GradientBundle, GradientBundle)> {
    let adapted = if split.inner.is_empty() || inner_rate == 0.0 {
        head.clone()
    } else {
        let xi = sub.x.select(Axis(0), &split.inner);
        let yi = sub.y.select(Axis(0), &split.inner);
        let hi = encoder.forward_batch(xi.view())?;
        inner_step(head, hi.view(), yi.view(), inner_rate)?
    };
    let xo = sub.x.select(Axis(0), &split.outer);
    let yo = sub.y.select(Axis(0), &split.outer);
    let enc_trace = encoder.forward_trace(xo.view())?;
    let head_trace = adapted.forward_trace(enc_trace.output().view())?;
    let resid = &head_trace.output().column(0) - &yo;
    let loss = resid.dot(&resid);
    let grad_out = (2.0 * resid).insert_axis(Axis(1));
    let (g_head, g_h) = adapted.backward_batch(&head_trace, grad_out.view(), true)?;
    let g_h = g_h.ok_or_else(|| Error::Estimation("missing feature gradient".into()))?;
    let (g_enc, _) = encoder.backward_batch(&enc_trace, g_h.view(), false)?;
    Ok((loss, g_enc, g_head))
}

/// Largest parameter count for which finite-difference gradients are allowed.
pub const FD_PARAM_LIMIT: usize = 5_000;
const FD_STEP: f64 = 1e-5;

fn finite_difference_gradients(
    encoder: &MlpParams,
    head: &MlpParams,
    sub: &SubTask,
    split: &InnerSplit,
    inner_rate: f64,
) -> Result<(f64, GradientBundle, GradientBundle)> {
    if encoder.num_params() + head.num_params() > FD_PARAM_LIMIT {
        return Err(Error::Config(format!(
            "second-order finite differences are limited to {FD_PARAM_LIMIT} parameters"
        )));
    }
    let loss = post_adaptation_loss(encoder, head, sub, split, inner_rate)?;
    let central = |enc: &MlpParams, hd: &MlpParams, which_enc: bool| -> Result<Vec<f64>> {
        let base = if which_enc { enc.flatten() } else { hd.flatten() };
        let mut grad = vec![0.0; base.len()];
        let mut probe_e = enc.clone();
        let mut probe_h = hd.clone();
        for j in 0..base.len() {
            let mut v = base.clone();
            v[j] = base[j] + FD_STEP;
            if which_enc { probe_e.set_flat(&v)? } else { probe_h.set_flat(&v)? }
            let up = post_adaptation_loss(&probe_e, &probe_h, sub, split, inner_rate)?;
            v[j] = base[j] - FD_STEP;
            if which_enc { probe_e.set_flat(&v)? } else { probe_h.set_flat(&v)? }
            let down = post_adaptation_loss(&probe_e, &probe_h, sub, split, inner_rate)?;
            grad[j] = (up - down) / (2.0 * FD_STEP);
        }
        Ok(grad)
    };
    let ge = central(encoder, head, true)?;
    let gh = central(encoder, head, false)?;
    Ok((loss, bundle_from_flat(encoder, &ge)?, bundle_from_flat(head, &gh)?))
}

fn bundle_from_flat(like: &MlpParams, flat: &[f64]) -> Result<GradientBundle> {
    let mut carrier = like.clone();
    carrier.set_flat(flat)?;
    Ok(GradientBundle {
        weights: carrier.weights().to_vec(),
        biases: carrier.biases().to_vec(),
    })
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MetaModel,
    /// Summed post-adaptation loss of each outer batch.
    pub batch_losses: Vec<f64>,
}

/// Called every `every` iterations with the iteration count and model.
pub struct Checkpoint<'a> {
    pub every: usize,
    pub callback: &'a mut dyn FnMut(usize, &MetaModel) -> Result<()>,
}

fn initial_model(d: usize, cfg: &MetaConfig, output: Activation, rng: &Rng, target: ModelTarget) -> Result<MetaModel> {
    let encoder = MlpParams::init(&cfg.encoder_dims(d), Activation::Relu, Activation::Identity, &mut rng.derive("init/encoder"))?;
    let head = cfg.init_head(output, &mut rng.derive("init/head"))?;
    MetaModel::new(encoder, head, cfg.clone(), rng.seed(), target)
}

/// Runs the outer loop on pre-split sub-tasks from a given starting model.
pub fn maml_train_from(
    start: MetaModel,
    subtasks: &[SubTask],
    cfg: &MetaConfig,
    rng: &Rng,
    mut checkpoint: Option<Checkpoint<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if subtasks.is_empty() {
        return Err(Error::Config("meta-training needs at least one sub-task".into()));
    }
    if subtasks.iter().any(|s| s.n() == 0) {
        return Err(Error::Shape("sub-tasks must be non-empty".into()));
    }
    let d = start.input_dim();
    if subtasks.iter().any(|s| s.x.ncols() != d) {
        return Err(Error::Shape(format!("sub-task covariates do not match encoder input {d}")));
    }
    let mut model = start;
    let mut opt_enc = Optimizer::new(cfg.optimizer, &model.encoder);
    let mut opt_head = Optimizer::new(cfg.optimizer, &model.head);
    let mut losses = Vec::with_capacity(cfg.meta_iters);
    let iter_rng = rng.derive("meta/iter");
    for it in 0..cfg.meta_iters {
        let mut r = iter_rng.derive_indexed("step", it);
        let batch: Vec<usize> = if cfg.batch_tasks <= subtasks.len() {
            r.choose_distinct(subtasks.len(), cfg.batch_tasks)
        } else {
            (0..cfg.batch_tasks).map(|_| r.index(subtasks.len())).collect()
        };
        let mut g_enc = GradientBundle::zeros_like(&model.encoder);
        let mut g_head = GradientBundle::zeros_like(&model.head);
        let mut batch_loss = 0.0;
        for &i in &batch {
            let sub = &subtasks[i];
            let split = InnerSplit::draw(sub.n(), cfg.inner_shots, cfg.outer_shots, &mut r);
            let (loss, ge, gh) = outer_gradients(&model.encoder, &model.head, sub, &split, cfg.inner_rate, cfg.grad_mode)?;
            batch_loss += loss;
            g_enc.add_assign(&ge);
            g_head.add_assign(&gh);
        }
        if !batch_loss.is_finite() || batch_loss > DIVERGENCE_LIMIT || !g_enc.is_finite() || !g_head.is_finite() {
            return Err(Error::Divergence { iteration: it, loss: batch_loss });
        }
        losses.push(batch_loss);
        opt_head.step(&mut model.head, &g_head, cfg.outer_rate_head)?;
        opt_enc.step(&mut model.encoder, &g_enc, cfg.outer_rate_encoder)?;
        if let Some(cp) = checkpoint.as_mut() {
            if cp.every > 0 && (it + 1) % cp.every == 0 {
                (cp.callback)(it + 1, &model)?;
            }
        }
        if it % 500 == 0 {
            log::debug!("meta iteration {it}: batch loss {batch_loss:.4}");
        }
    }
    Ok(TrainReport { model, batch_losses: losses })
}

/// Meta-trains an encoder and meta head on the arm-wise sub-tasks.
pub fn maml_train_subtasks(
    subtasks: &[SubTask],
    cfg: &MetaConfig,
    rng: &Rng,
    checkpoint: Option<Checkpoint<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let d = subtasks.first().map(|s| s.x.ncols()).ok_or_else(|| Error::Config("no sub-tasks to train on".into()))?;
    let start = initial_model(d, cfg, Activation::Identity, rng, ModelTarget::Outcome)?;
    maml_train_from(start, subtasks, cfg, rng, checkpoint)
}

pub fn maml_train(taskset: &TaskSet, cfg: &MetaConfig, rng: &Rng) -> Result<MetaModel> {
    let subtasks = split_tasks(&taskset.tasks);
    Ok(maml_train_subtasks(&subtasks, cfg, rng, None)?.model)
}

/// Same procedure with treatment indicators as targets, one sub-task per
/// task and a Sigmoid head, yielding a propensity representation.
pub fn maml_train_propensity(taskset: &TaskSet, cfg: &MetaConfig, rng: &Rng) -> Result<MetaModel> {
    maml_train_propensity_report(taskset, cfg, rng, None).map(|r| r.model)
}

pub fn maml_train_propensity_report(
    taskset: &TaskSet,
    cfg: &MetaConfig,
    rng: &Rng,
    checkpoint: Option<Checkpoint<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let subtasks: Vec<SubTask> = taskset.tasks.iter().map(SubTask::treatment_target).collect();
    let start = initial_model(taskset.d_max, cfg, Activation::Sigmoid, rng, ModelTarget::Propensity)?;
    maml_train_from(start, &subtasks, cfg, rng, checkpoint)
}

/// Adapts the meta head to one sub-task: `inner_steps_adapt` gradient steps
/// on its full data with the encoder frozen.
pub fn adapt(model: &MetaModel, sub: &SubTask, cfg: &MetaConfig) -> Result<MlpParams> {
    if sub.n() == 0 {
        return Err(Error::Shape("cannot adapt to an empty sub-task".into()));
    }
    let h = model.encode(sub.x.view())?;
    adapt_on_features(&model.head, h.view(), sub.y.view(), cfg.inner_steps_adapt, cfg.adapt_rate())
}

/// Gradient steps on `Σ (y − f(h))²` from `head` for fixed features.
pub fn adapt_on_features(
    head: &MlpParams,
    h: ArrayView2<f64>,
    y: ArrayView1<f64>,
    steps: usize,
    rate: f64,
) -> Result<MlpParams> {
    let mut current = head.clone();
    if rate == 0.0 {
        return Ok(current);
    }
    for _ in 0..steps {
        let (_, g) = head_gradient(&current, h, y)?;
        current.sgd_update(&g, rate)?;
    }
    if !current.is_finite() {
        return Err(Error::Divergence { iteration: steps, loss: f64::INFINITY });
    }
    Ok(current)
}

/// Mean over sub-tasks of the adapted heads' losses on their own data.
pub fn meta_loss(model: &MetaModel, subtasks: &[SubTask], cfg: &MetaConfig) -> Result<f64> {
    if subtasks.is_empty() {
        return Err(Error::Config("meta loss needs at least one sub-task".into()));
    }
    let mut total = 0.0;
    for sub in subtasks {
        let h = model.encode(sub.x.view())?;
        let head = adapt_on_features(&model.head, h.view(), sub.y.view(), cfg.inner_steps_adapt, cfg.adapt_rate())?;
        total += head_loss(&head, h.view(), sub.y.view())?;
    }
    Ok(total / subtasks.len() as f64)
}

/// Features of a batch under a model, or the batch itself without one.
pub fn features(encoder: Option<&MlpParams>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    match encoder {
        Some(e) => e.forward_batch(x),
        None => Ok(x.to_owned()),
    }
}

/// Scalar predictions of a head on features.
pub fn head_predict(head: &MlpParams, h: ArrayView2<f64>) -> Result<Array1<f64>> {
    Ok(head.forward_batch(h)?.column(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metalearn::model::HeadClass;
    use ndarray::array;

    fn toy_subtasks(rng: &mut Rng, d: usize, count: usize, n: usize) -> Vec<SubTask> {
        (0..count)
            .map(|k| {
                let x = Array2::from_shape_fn((n, d), |_| rng.uniform(-1.0, 1.0));
                let w: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let y = x.dot(&Array1::from(w)).mapv(|v| v.tanh());
                SubTask { parent: k, arm: Some((k % 2) as u8), x, y }
            })
            .collect()
    }

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            s: 3,
            encoder_hidden: vec![6],
            head_hidden: vec![4, 4],
            batch_tasks: 2,
            inner_shots: 5,
            meta_iters: 20,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rates_are_a_fixpoint() {
        let mut rng = Rng::root(1);
        let subs = toy_subtasks(&mut rng, 4, 4, 20);
        let cfg = MetaConfig { inner_rate: 0.0, outer_rate_head: 0.0, outer_rate_encoder: 0.0, ..small_cfg() };
        let start = initial_model(4, &cfg, Activation::Identity, &Rng::root(2), ModelTarget::Outcome).unwrap();
        let out = maml_train_from(start.clone(), &subs, &cfg, &Rng::root(2), None).unwrap();
        assert_eq!(out.model, start);
    }

    #[test]
    fn inner_split_is_disjoint_and_bounded() {
        let mut rng = Rng::root(4);
        let s = InnerSplit::draw(10, 4, None, &mut rng);
        assert_eq!(s.inner.len(), 4);
        assert_eq!(s.outer.len(), 6);
        assert!(s.inner.iter().all(|i| !s.outer.contains(i)));
        let s = InnerSplit::draw(3, 32, None, &mut rng);
        assert_eq!((s.inner.len(), s.outer.len()), (2, 1));
        let s = InnerSplit::draw(10, 2, Some(3), &mut rng);
        assert_eq!(s.outer.len(), 3);
    }

    #[test]
    fn single_linear_step_is_least_squares_gradient() {
        // Identity encoder (1 → 1) and linear head; α_in = 0, b = 1.
        let encoder = MlpParams::new(vec![array![[1.0]]], vec![array![0.0]], Activation::Relu, Activation::Identity).unwrap();
        let head = MlpParams::new(vec![array![[0.5]]], vec![array![0.1]], Activation::Identity, Activation::Identity).unwrap();
        let x = array![[0.2], [0.4], [0.9], [0.6]];
        let y = array![1.0, 0.3, -0.2, 0.8];
        let sub = SubTask { parent: 0, arm: Some(1), x: x.clone(), y: y.clone() };
        let cfg = MetaConfig {
            s: 1,
            encoder_hidden: vec![],
            head_class: HeadClass::Linear,
            inner_rate: 0.0,
            outer_rate_head: 0.05,
            outer_rate_encoder: 0.0,
            batch_tasks: 1,
            inner_shots: 0,
            meta_iters: 1,
            ..Default::default()
        };
        let start = MetaModel::new(encoder, head, cfg.clone(), 0, ModelTarget::Outcome).unwrap();
        let out = maml_train_from(start, std::slice::from_ref(&sub), &cfg, &Rng::root(0), None).unwrap();
        // ∇_w Σ (w x + b − y)² = 2 Σ (w x + b − y) x ; ∇_b = 2 Σ (w x + b − y)
        let (mut gw, mut gb) = (0.0, 0.0);
        for i in 0..4 {
            let r = 0.5 * x[[i, 0]] + 0.1 - y[i];
            gw += 2.0 * r * x[[i, 0]];
            gb += 2.0 * r;
        }
        assert!((out.model.head.weights()[0][[0, 0]] - (0.5 - 0.05 * gw)).abs() < 1e-14);
        assert!((out.model.head.biases()[0][0] - (0.1 - 0.05 * gb)).abs() < 1e-14);
    }

    #[test]
    fn first_order_matches_finite_differences_with_frozen_adaptation() {
        // Tiny net: encoder 1 → 1 (2 params), head 1 → 1 Tanh-free linear (2 params) ...
        let mut rng = Rng::root(6);
        let encoder = MlpParams::init(&[2, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let head = MlpParams::init(&[1, 1], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let sub = toy_subtasks(&mut rng, 2, 1, 12).remove(0);
        let split = InnerSplit::draw(12, 4, None, &mut rng);
        let alpha = 0.05;
        let (_, ge, gh) = first_order_gradients(&encoder, &head, &sub, &split, alpha).unwrap();
        // Adapted head held constant: differentiate L(f_{φ'}∘h_θ, D') in θ
        // and in the head parameters evaluated at φ'.
        let xi = sub.x.select(Axis(0), &split.inner);
        let yi = sub.y.select(Axis(0), &split.inner);
        let adapted = inner_step(&head, encoder.forward_batch(xi.view()).unwrap().view(), yi.view(), alpha).unwrap();
        let xo = sub.x.select(Axis(0), &split.outer);
        let yo = sub.y.select(Axis(0), &split.outer);
        let loss = |e: &MlpParams, h: &MlpParams| task_loss(h, e, xo.view(), yo.view()).unwrap();
        let eps = 1e-6;
        let check = |analytic: &[f64], base: &MlpParams, is_enc: bool| {
            let flat = base.flatten();
            for j in 0..flat.len() {
                let mut up = base.clone();
                let mut down = base.clone();
                let mut v = flat.clone();
                v[j] += eps;
                up.set_flat(&v).unwrap();
                v[j] -= 2.0 * eps;
                down.set_flat(&v).unwrap();
                let fd = if is_enc {
                    (loss(&up, &adapted) - loss(&down, &adapted)) / (2.0 * eps)
                } else {
                    (loss(&encoder, &up) - loss(&encoder, &down)) / (2.0 * eps)
                };
                let rel = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-8);
                assert!(rel < 1e-3, "coordinate {j}: fd {fd} analytic {}", analytic[j]);
            }
        };
        check(&ge.flatten(), &encoder, true);
        check(&gh.flatten(), &adapted, false);
    }

    #[test]
    fn second_order_differs_from_first_order_only_through_inner_step() {
        let mut rng = Rng::root(8);
        let encoder = MlpParams::init(&[2, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let head = MlpParams::init(&[2, 1], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let sub = toy_subtasks(&mut rng, 2, 1, 10).remove(0);
        let split = InnerSplit::draw(10, 3, None, &mut rng);
        let (_, fe, fh) = first_order_gradients(&encoder, &head, &sub, &split, 0.0).unwrap();
        let (_, se, sh) = finite_difference_gradients(&encoder, &head, &sub, &split, 0.0).unwrap();
        for (a, b) in fe.flatten().iter().chain(fh.flatten().iter()).zip(se.flatten().iter().chain(sh.flatten().iter())) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn adapt_zero_rate_and_perfect_fit() {
        let mut rng = Rng::root(3);
        let subs = toy_subtasks(&mut rng, 3, 1, 10);
        let cfg = MetaConfig { inner_rate: 0.0, ..small_cfg() };
        let model = initial_model(3, &cfg, Activation::Identity, &Rng::root(1), ModelTarget::Outcome).unwrap();
        assert_eq!(adapt(&model, &subs[0], &cfg).unwrap(), model.head);
        let perfect = SubTask { y: model.predict(subs[0].x.view()).unwrap(), ..subs[0].clone() };
        let cfg = MetaConfig { inner_rate: 0.1, ..small_cfg() };
        assert_eq!(adapt(&model, &perfect, &cfg).unwrap(), model.head);
        let empty = SubTask { x: Array2::zeros((0, 3)), y: Array1::zeros(0), ..subs[0].clone() };
        assert!(adapt(&model, &empty, &cfg).is_err());
    }

    #[test]
    fn adapt_linear_one_step() {
        let encoder = MlpParams::new(vec![Array2::eye(2)], vec![Array1::zeros(2)], Activation::Relu, Activation::Identity).unwrap();
        let head = MlpParams::new(vec![array![[0.3, -0.2]]], vec![array![0.05]], Activation::Identity, Activation::Identity).unwrap();
        let cfg = MetaConfig { s: 2, head_class: HeadClass::Linear, inner_rate: 0.01, inner_steps_adapt: 1, ..Default::default() };
        let model = MetaModel::new(encoder, head, cfg.clone(), 0, ModelTarget::Outcome).unwrap();
        let x = array![[0.5, 0.25], [0.75, 0.5], [0.125, 0.875]];
        let y = array![1.0, -1.0, 0.5];
        let sub = SubTask { parent: 0, arm: Some(0), x: x.clone(), y: y.clone() };
        let adapted = adapt(&model, &sub, &cfg).unwrap();
        // Normal-equations gradient: 2 Xᵀ(Xw + b − y), 2 Σ (Xw + b − y)
        let w = array![0.3, -0.2];
        let r = x.dot(&w) + 0.05 - &y;
        let gw = 2.0 * x.t().dot(&r);
        let gb = 2.0 * r.sum();
        for j in 0..2 {
            assert!((adapted.weights()[0][[0, j]] - (w[j] - 0.01 * gw[j])).abs() < 1e-14);
        }
        assert!((adapted.biases()[0][0] - (0.05 - 0.01 * gb)).abs() < 1e-14);
    }

    #[test]
    fn meta_loss_is_a_mean() {
        let mut rng = Rng::root(5);
        let subs = toy_subtasks(&mut rng, 3, 3, 8);
        let cfg = MetaConfig { inner_steps_adapt: 2, inner_rate: 0.01, ..small_cfg() };
        let model = initial_model(3, &cfg, Activation::Identity, &Rng::root(1), ModelTarget::Outcome).unwrap();
        let single = meta_loss(&model, &subs[..1], &cfg).unwrap();
        let head = adapt(&model, &subs[0], &cfg).unwrap();
        assert_eq!(single, task_loss(&head, &model.encoder, subs[0].x.view(), subs[0].y.view()).unwrap());
        let twice = vec![subs[0].clone(), subs[0].clone()];
        assert_eq!(meta_loss(&model, &twice, &cfg).unwrap(), single);
        let each: Vec<f64> = subs.iter().map(|s| meta_loss(&model, std::slice::from_ref(s), &cfg).unwrap()).collect();
        let all = meta_loss(&model, &subs, &cfg).unwrap();
        assert!((all - each.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut rng = Rng::root(9);
        let subs = toy_subtasks(&mut rng, 4, 6, 40);
        let cfg = MetaConfig {
            meta_iters: 300,
            optimizer: crate::numerics::OptimizerKind::Adam,
            outer_rate_head: 0.01,
            outer_rate_encoder: 0.01,
            inner_steps_adapt: 0,
            ..small_cfg()
        };
        let a = maml_train_subtasks(&subs, &cfg, &Rng::root(3), None).unwrap();
        let b = maml_train_subtasks(&subs, &cfg, &Rng::root(3), None).unwrap();
        assert_eq!(a.model, b.model);
        let init = initial_model(4, &cfg, Activation::Identity, &Rng::root(3), ModelTarget::Outcome).unwrap();
        assert!(meta_loss(&a.model, &subs, &cfg).unwrap() < meta_loss(&init, &subs, &cfg).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = Rng::root(2);
        let mut subs = toy_subtasks(&mut rng, 3, 2, 30);
        subs.iter_mut().for_each(|s| s.y.mapv_inplace(|v| v * 1e4));
        let cfg = MetaConfig { outer_rate_head: 10.0, outer_rate_encoder: 10.0, meta_iters: 50, ..small_cfg() };
        let r = maml_train_subtasks(&subs, &cfg, &Rng::root(1), None);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let cfg = small_cfg();
        let model = initial_model(5, &cfg, Activation::Identity, &Rng::root(77), ModelTarget::Outcome).unwrap();
        let back = MetaModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
