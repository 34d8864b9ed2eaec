//! Property checks shared by the property suites and the acceptance run.
//! Each check draws its instance from a seed and returns the observed
//! error, so callers can drive it from proptest or from a fixed seed list.
#![allow(dead_code)]

use covrep_core::datagen::{TaskFunctionParams, TaskSet};
use covrep_core::design::{diff_in_means, mahalanobis, Assignment};
use covrep_core::estimators::dr_estimate;
use covrep_core::metalearn::{
    maml_train_subtasks, GradMode, HeadClass, MetaConfig, MetaModel, SubTask,
};
use covrep_core::numerics::{chi2_cdf, chi2_inv, Activation, MlpParams, OptimizerKind, Rng};
use ndarray::{Array1, Array2};

const ACTIVATIONS: [Activation; 4] = [Activation::Relu, Activation::Tanh, Activation::Identity, Activation::Sigmoid];

fn uniform_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform(-1.0, 1.0))
}

/// A random scalar-output network with non-zero biases.
pub fn random_net(rng: &mut Rng) -> MlpParams {
    let depth = 1 + rng.index(3);
    let mut dims = vec![1 + rng.index(5)];
    dims.extend((1..depth).map(|_| 1 + rng.index(6)));
    dims.push(1);
    let hidden = ACTIVATIONS[rng.index(ACTIVATIONS.len())];
    let output = if rng.bernoulli(0.5) { Activation::Identity } else { Activation::Sigmoid };
    let mut net = MlpParams::init(&dims, hidden, output, rng).unwrap();
    let flat: Vec<f64> = net.flatten().iter().map(|w| w + rng.uniform(-0.5, 0.5)).collect();
    net.set_flat(&flat).unwrap();
    net
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, 1e-8)` between the backpropagated
/// gradient of the summed squared error and central finite differences.
pub fn mlp_gradient_fd_error(seed: u64) -> f64 {
    let mut rng = Rng::root(seed).derive("mlp-fd");
    let net = random_net(&mut rng);
    let n = 1 + rng.index(5);
    let x = uniform_matrix(n, net.input_dim(), &mut rng);
    let y: Array1<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let (_, grads) = net.squared_error(x.view(), y.view()).unwrap();
    let analytic = grads.flatten();
    let base = net.flatten();
    let h = 1e-6;
    let loss_at = |values: &[f64]| {
        let mut p = net.clone();
        p.set_flat(values).unwrap();
        let out = p.forward_batch(x.view()).unwrap();
        out.column(0).iter().zip(&y).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
    };
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        diff2 += (analytic[i] - fd).powi(2);
        norm2 += analytic[i].powi(2);
    }
    diff2.sqrt() / norm2.sqrt().max(1e-8)
}

/// A random assignment of `m` units with at least two per arm.
pub fn random_assignment(m: usize, rng: &mut Rng) -> Assignment {
    let m1 = 2 + rng.index(m - 3);
    Assignment::complete_randomization(m, m1, rng).unwrap()
}

/// Relative change of the Mahalanobis distance under `z ↦ zA + b` with a
/// random well-conditioned `A`.
pub fn mahalanobis_affine_error(seed: u64) -> f64 {
    let mut rng = Rng::root(seed).derive("mahalanobis");
    let q = 1 + rng.index(6);
    let m = q + 6 + rng.index(30);
    let z = uniform_matrix(m, q, &mut rng);
    let a = Array2::<f64>::eye(q) * 2.0 + uniform_matrix(q, q, &mut rng) * 0.5;
    let b: Array1<f64> = (0..q).map(|_| rng.uniform(-5.0, 5.0)).collect();
    let za = z.dot(&a) + &b;
    let w = random_assignment(m, &mut rng);
    let (d0, _) = mahalanobis(z.view(), &w).unwrap();
    let (d1, _) = mahalanobis(za.view(), &w).unwrap();
    (d0 - d1).abs() / d0.abs().max(1e-12)
}

fn combinations(m: usize, k: usize) -> Vec<Vec<u8>> {
    (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..m).map(|i| u8::from(mask >> i & 1 == 1)).collect())
        .collect()
}

/// `|mean over all assignments of diff_in_means − (ȳ₁ − ȳ₀)|` for a random
/// finite population of `m ≤ 8` units with integer potential outcomes.
pub fn exhaustive_unbiasedness_error(m: usize, seed: u64) -> f64 {
    let mut rng = Rng::root(seed).derive("exhaustive");
    let m1 = 1 + rng.index(m - 1);
    let y1: Vec<f64> = (0..m).map(|_| (rng.index(21) as f64) - 10.0).collect();
    let y0: Vec<f64> = (0..m).map(|_| (rng.index(21) as f64) - 10.0).collect();
    let assignments = combinations(m, m1);
    let total: f64 = assignments
        .iter()
        .map(|ind| {
            let a = Assignment::new(ind.clone()).unwrap();
            let y: Array1<f64> = (0..m).map(|i| if ind[i] == 1 { y1[i] } else { y0[i] }).collect();
            diff_in_means(&a, y.view()).unwrap()
        })
        .sum();
    let mean = total / assignments.len() as f64;
    let truth = (y1.iter().sum::<f64>() - y0.iter().sum::<f64>()) / m as f64;
    (mean - truth).abs()
}

/// `|F(F⁻¹(p)) − p|` and `|F⁻¹(F(x)) − x| / max(1, x)` for one draw.
pub fn chi2_roundtrip_errors(df: u32, u: f64) -> (f64, f64) {
    let p = 1e-6 + u * (1.0 - 2e-6);
    let x = chi2_inv(p, df).unwrap();
    let back = chi2_cdf(x, df).unwrap();
    let x2 = chi2_inv(back, df).unwrap();
    ((back - p).abs(), (x2 - x).abs() / x.max(1.0))
}

/// Largest error of the two algebraic reductions of the DR estimator:
/// zero outcome models give Horvitz–Thompson, and perfect noiseless
/// outcome models give the mean of the unit effects.
pub fn dr_identity_error(seed: u64) -> f64 {
    let mut rng = Rng::root(seed).derive("dr");
    let n = 4 + rng.index(40);
    let mut treat: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    rng.shuffle(&mut treat);
    // Dyadic values keep every quantity exactly representable.
    let dyadic = |rng: &mut Rng| (rng.index(64) as f64 - 32.0) / 8.0;
    let y1: Array1<f64> = (0..n).map(|_| dyadic(&mut rng)).collect();
    let y0: Array1<f64> = (0..n).map(|_| dyadic(&mut rng)).collect();
    let y: Array1<f64> = (0..n).map(|i| if treat[i] == 1 { y1[i] } else { y0[i] }).collect();
    let n1 = treat.iter().filter(|&&t| t == 1).count() as f64;
    let p = n1 / n as f64;
    let p_hat = Array1::from_elem(n, p);
    let zeros = Array1::zeros(n);
    let ht = dr_estimate(&treat, y.view(), zeros.view(), zeros.view(), p_hat.view()).unwrap().tau_hat;
    let ht_oracle: f64 = (0..n)
        .map(|i| if treat[i] == 1 { y[i] / (n as f64 * p) } else { -y[i] / (n as f64 * (1.0 - p)) })
        .sum();
    let perfect = dr_estimate(&treat, y.view(), y1.view(), y0.view(), p_hat.view()).unwrap().tau_hat;
    let mean_effect = (&y1 - &y0).sum() / n as f64;
    (ht - ht_oracle).abs().max((perfect - mean_effect).abs())
}

/// Tiny sub-tasks for meta-learning checks.
pub fn tiny_subtasks(d: usize, count: usize, n: usize, rng: &mut Rng) -> Vec<SubTask> {
    (0..count)
        .map(|i| {
            let x = uniform_matrix(n, d, rng);
            let a: Array1<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y = x.dot(&a);
            SubTask { parent: i / 2, arm: Some((i % 2) as u8), x, y }
        })
        .collect()
}

pub fn tiny_meta_config(grad_mode: GradMode, optimizer: OptimizerKind) -> MetaConfig {
    MetaConfig {
        s: 3,
        encoder_hidden: vec![4],
        head_hidden: vec![3],
        head_class: HeadClass::TanhMlp,
        batch_tasks: 3,
        inner_shots: 5,
        meta_iters: 7,
        grad_mode,
        optimizer,
        ..MetaConfig::default()
    }
}

/// Trains with every rate at zero and reports whether both networks are
/// bit-identical to an untrained (zero-iteration) run from the same seed.
pub fn zero_rate_fixpoint(seed: u64, grad_mode: GradMode, optimizer: OptimizerKind) -> bool {
    let mut rng = Rng::root(seed).derive("fixpoint");
    let subtasks = tiny_subtasks(4, 6, 20, &mut rng);
    let cfg = MetaConfig {
        inner_rate: 0.0,
        outer_rate_head: 0.0,
        outer_rate_encoder: 0.0,
        ..tiny_meta_config(grad_mode, optimizer)
    };
    let train_rng = Rng::root(seed).derive("train");
    let trained = maml_train_subtasks(&subtasks, &cfg, &train_rng, None).unwrap().model;
    let start = maml_train_subtasks(&subtasks, &MetaConfig { meta_iters: 0, ..cfg }, &train_rng, None).unwrap().model;
    let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(&trained.encoder) == bits(&start.encoder) && bits(&trained.head) == bits(&start.head)
}

/// Round-trips a trained model and outcome parameters through JSON and
/// reports whether every value comes back bit-identical.
pub fn serialization_roundtrip_exact(seed: u64) -> bool {
    let mut rng = Rng::root(seed).derive("serde");
    let subtasks = tiny_subtasks(3, 4, 12, &mut rng);
    let cfg = MetaConfig { meta_iters: 3, ..tiny_meta_config(GradMode::FirstOrder, OptimizerKind::Adam) };
    let model = maml_train_subtasks(&subtasks, &cfg, &Rng::root(seed), None).unwrap().model;
    let back = MetaModel::from_json(&model.to_json().unwrap()).unwrap();
    let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let model_ok = back == model && bits(&back.encoder) == bits(&model.encoder) && bits(&back.head) == bits(&model.head);
    let params = TaskFunctionParams {
        a: (0..5).map(|_| rng.standard_normal() * 1e-3).collect(),
        b: rng.standard_normal(),
        noise_sd: rng.uniform(0.0, 1.0),
        link: Default::default(),
    };
    let params_back: TaskFunctionParams = serde_json::from_str(&serde_json::to_string(&params).unwrap()).unwrap();
    model_ok && params_back == params
}

/// Round-trips a task set through its CSV files and manifest.
pub fn taskset_roundtrip_exact(set: &TaskSet) -> bool {
    let dir = tempfile::tempdir().unwrap();
    covrep_core::datagen::io::write_taskset(set, dir.path(), "test", 0).unwrap();
    let (back, _) =
        covrep_core::datagen::io::read_taskset(&dir.path().join(covrep_core::datagen::io::TASKSET_MANIFEST)).unwrap();
    let same = |a: &covrep_core::datagen::Task, b: &covrep_core::datagen::Task| {
        a.x.iter().zip(b.x.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
            && a.y.iter().zip(b.y.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
            && a.treat == b.treat
            && a.x.dim() == b.x.dim()
    };
    back.tasks.len() == set.tasks.len()
        && back.tasks.iter().zip(&set.tasks).all(|(a, b)| same(a, b))
        && same(&back.target, &set.target)
}

/// Observed ReM acceptance rate: the fraction of `draws` complete
/// randomizations whose distance is at most `threshold`.
pub fn acceptance_rate(z: &Array2<f64>, m1: usize, threshold: f64, draws: usize, rng: &mut Rng) -> f64 {
    let m = z.nrows();
    let sampler = covrep_core::design::RemSampler::new(z.view(), m1).unwrap();
    let accepted = (0..draws)
        .filter(|_| {
            let a = Assignment::complete_randomization(m, m1, rng).unwrap();
            sampler.distance(&a).unwrap() <= threshold
        })
        .count();
    accepted as f64 / draws as f64
}

/// Standard normal covariates.
pub fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.standard_normal())
}
