//! Synthetic probe-and-answer environment with a tabular softmax policy,
//! used to exercise the full rollout, reward, advantage, clipped surrogate
//! and update loop, and to compare training with and without length
//! normalization.

mod env;
mod policy;
mod train;

pub use env::{step_bucket, ToyAction, ToyEnv, ToyEpisode, STEP_BUCKETS};
pub use policy::{SoftmaxPolicy, ToyRecord, LOGIT_CLAMP};
pub use train::{
    apply_gradient, build_records, policy_gradient_step, random_records, toy_rollout, train_toy,
    GradientStepOptions, IterationMetrics, ToyStep, ToyTrainConfig, ToyTrajectory, TrainRunMetrics,
};
