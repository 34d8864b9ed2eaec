//! Tasks observing different subsets of a global feature catalogue, and
//! their embedding into the full catalogue with a missingness mask.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::task::{GeneratorConfig, Task, TaskSet};
use crate::error::{domain_err, Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Zero,
    FeatureMean,
}

/// A task in its native covariates: column `j` of `task.x` is catalogue
/// feature `features[j]`.
#[derive(Debug, Clone)]
pub struct NativeTask {
    pub features: Vec<usize>,
    pub task: Task,
}

impl NativeTask {
    pub fn new(features: Vec<usize>, task: Task) -> Result<Self> {
        if features.len() != task.d() {
            return Err(Error::Schema(format!(
                "{} feature ids for {} covariate columns",
                features.len(),
                task.d()
            )));
        }
        let mut sorted = features.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != features.len() {
            return Err(Error::Schema("feature ids within a task must be distinct".into()));
        }
        Ok(Self { features, task })
    }
}

/// Mean of every catalogue feature over all units of all tasks observing
/// it; features nobody observes get 0.
pub fn feature_means(tasks: &[NativeTask], d_max: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; d_max];
    let mut counts = vec![0usize; d_max];
    for nt in tasks {
        check_catalogue(nt, d_max)?;
        let col_sums = nt.task.x.sum_axis(Axis(0));
        for (j, &f) in nt.features.iter().enumerate() {
            sums[f] += col_sums[j];
            counts[f] += nt.task.n();
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}

fn check_catalogue(nt: &NativeTask, d_max: usize) -> Result<()> {
    if let Some(&bad) = nt.features.iter().find(|&&f| f >= d_max) {
        return Err(Error::Schema(format!(
            "task {} references feature {bad} outside the catalogue of size {d_max}",
            nt.task.id
        )));
    }
    Ok(())
}

/// Embeds one task into the catalogue, filling unobserved slots from `fill`.
pub fn pad_task(nt: &NativeTask, d_max: usize, fill: &[f64]) -> Result<Task> {
    check_catalogue(nt, d_max)?;
    if fill.len() != d_max {
        return domain_err("fill vector must have catalogue length");
    }
    let n = nt.task.n();
    let mut x = Array2::from_shape_fn((n, d_max), |(_, j)| fill[j]);
    let mut mask = vec![0u8; d_max];
    for (j, &f) in nt.features.iter().enumerate() {
        x.column_mut(f).assign(&nt.task.x.column(j));
        mask[f] = 1;
    }
    let mut padded = Task { x, mask: None, ..nt.task.clone() };
    padded = padded.with_mask(mask)?;
    Ok(padded)
}

/// Pads historical and target tasks to `d_max`. Feature means are taken
/// over the historical tasks.
pub fn pad_taskset(tasks: &[NativeTask], target: &NativeTask, d_max: usize, fill: FillMode) -> Result<TaskSet> {
    let fill_values = match fill {
        FillMode::Zero => vec![0.0; d_max],
        FillMode::FeatureMean => feature_means(tasks, d_max)?,
    };
    let padded = tasks.iter().map(|t| pad_task(t, d_max, &fill_values)).collect::<Result<Vec<_>>>()?;
    let target = pad_task(target, d_max, &fill_values)?;
    TaskSet::new(padded, target)
}

/// Restricts a task to a feature subset, keeping its truth (which still
/// refers to the full catalogue).
pub fn restrict(task: &Task, features: Vec<usize>) -> Result<NativeTask> {
    let mut native = task.clone();
    native.x = task.x.select(Axis(1), &features);
    native.native_dim = features.len();
    native.mask = None;
    NativeTask::new(features, native)
}

/// Range of observed-feature counts per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedRange {
    pub min: usize,
    pub max: usize,
}

impl Default for ObservedRange {
    fn default() -> Self {
        Self { min: 100, max: 300 }
    }
}

/// Simulates tasks over the full catalogue (`cfg.d` = d_max), then lets
/// each observe a random subset of `d_k ∈ [min, max]` features.
pub fn gen_native_taskset(cfg: &GeneratorConfig, observed: ObservedRange, rng: &Rng) -> Result<(Vec<NativeTask>, NativeTask)> {
    cfg.validate()?;
    if observed.min == 0 || observed.min > observed.max || observed.max > cfg.d {
        return Err(Error::Config(format!(
            "observed range [{}, {}] must lie within [1, {}]",
            observed.min, observed.max, cfg.d
        )));
    }
    let rep = cfg.draw_representation(rng)?;
    let native = |id: usize, n: usize, stream: Rng| -> Result<NativeTask> {
        let full = cfg.draw_task(id, &rep, n, &stream)?;
        let mut pick = stream.derive("features");
        let d_k = observed.min + pick.index(observed.max - observed.min + 1);
        let mut features = pick.choose_distinct(cfg.d, d_k);
        features.sort_unstable();
        restrict(&full, features)
    };
    let tasks = (0..cfg.k)
        .map(|k| native(k + 1, cfg.n, rng.derive_indexed("gen", k)))
        .collect::<Result<Vec<_>>>()?;
    let target = native(0, cfg.n_target, rng.derive("gen/target"))?;
    Ok((tasks, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn task(x: Array2<f64>) -> Task {
        let n = x.nrows();
        Task::new(0, x, vec![0; n], Array1::zeros(n)).unwrap()
    }

    #[test]
    fn full_task_is_unchanged() {
        let x = array![[1.0, 2.0, 3.0]];
        let nt = NativeTask::new(vec![0, 1, 2], task(x.clone())).unwrap();
        let set = pad_taskset(std::slice::from_ref(&nt), &nt, 3, FillMode::FeatureMean).unwrap();
        assert_eq!(set.tasks[0].x, x);
        assert_eq!(set.tasks[0].mask.as_deref(), Some(&[1u8, 1, 1][..]));
    }

    #[test]
    fn zero_fill() {
        let nt = NativeTask::new(vec![0, 2], task(array![[5.0, 7.0]])).unwrap();
        let padded = pad_task(&nt, 4, &[0.0; 4]).unwrap();
        assert_eq!(padded.x, array![[5.0, 0.0, 7.0, 0.0]]);
        assert_eq!(padded.mask.as_deref(), Some(&[1u8, 0, 1, 0][..]));
        assert_eq!(padded.native_dim, 2);
    }

    #[test]
    fn feature_mean_fill() {
        let a = NativeTask::new(vec![0, 1], task(array![[1.0, 10.0], [3.0, 20.0]])).unwrap();
        let b = NativeTask::new(vec![1, 2], task(array![[30.0, -1.0]])).unwrap();
        let set = pad_taskset(&[a, b], &NativeTask::new(vec![2], task(array![[4.0]])).unwrap(), 3, FillMode::FeatureMean).unwrap();
        // feature 0 observed by task a only: mean (1 + 3) / 2; feature 2 by b only: -1
        assert_eq!(set.tasks[1].x, array![[2.0, 30.0, -1.0]]);
        assert_eq!(set.tasks[0].x.column(2).to_vec(), vec![-1.0, -1.0]);
        // target misses features 0 and 1; feature 1 mean = (10 + 20 + 30) / 3
        assert_eq!(set.target.x, array![[2.0, 20.0, 4.0]]);
    }

    #[test]
    fn out_of_catalogue_is_schema_error() {
        let nt = NativeTask::new(vec![0, 5], task(array![[1.0, 2.0]])).unwrap();
        assert!(matches!(pad_task(&nt, 4, &[0.0; 4]), Err(Error::Schema(_))));
    }

    #[test]
    fn generated_native_tasks_respect_range() {
        let cfg = GeneratorConfig { d: 40, r: 5, k: 4, n: 10, n_target: 10, ..Default::default() };
        let (tasks, target) = gen_native_taskset(&cfg, ObservedRange { min: 10, max: 30 }, &Rng::root(3)).unwrap();
        for nt in tasks.iter().chain(std::iter::once(&target)) {
            assert!((10..=30).contains(&nt.features.len()));
            assert_eq!(nt.task.d(), nt.features.len());
        }
        let set = pad_taskset(&tasks, &target, 40, FillMode::Zero).unwrap();
        for (p, nt) in set.tasks.iter().zip(&tasks) {
            let restored = p.x.select(Axis(1), &nt.features);
            assert_eq!(restored, nt.task.x);
        }
    }
}
