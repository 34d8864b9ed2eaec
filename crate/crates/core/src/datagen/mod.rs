//! Synthetic multi-task causal data: ground-truth representations, logistic
//! outcome functions, treatment assignment, padding and persistence.

pub mod io;
pub mod padding;
pub mod task;
pub mod truth;

pub use padding::{gen_native_taskset, pad_task, pad_taskset, FillMode, NativeTask, ObservedRange};
pub use task::{
    gen_task, gen_task_from_truth, gen_task_with, gen_taskset, oracle_effects, GeneratorConfig, OracleEffects,
    PotentialOutcomes, PropensitySpec, Sample, Task, TaskSet, ORACLE_DRAWS,
};
pub use truth::{
    assign_treatment, draw_covariates, gen_representation, GroundTruthPropensity, GroundTruthRep, Link, RepKind,
    RepPayload, TaskFunctionParams, TaskTruth,
};
