//! Meta-learning of a shared covariate representation: arm-wise sub-tasks,
//! first-order MAML training and head adaptation.

pub mod maml;
pub mod model;

pub use maml::{
    adapt, adapt_on_features, features, head_predict, maml_train, maml_train_from, maml_train_propensity,
    maml_train_propensity_report, maml_train_subtasks, meta_loss, outer_gradients, post_adaptation_loss, Checkpoint,
    InnerSplit, TrainReport, DIVERGENCE_LIMIT,
};
pub use model::{
    split_taskset, split_tasks, task_loss, GradMode, HeadClass, MetaConfig, MetaModel, ModelTarget, SubTask,
};
