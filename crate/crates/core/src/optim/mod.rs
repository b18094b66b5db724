//! Momentum SGD, the training loop with its metrics, and the
//! finite-difference gradient checker.

pub mod gradcheck;
mod sgd;
mod train;

pub use gradcheck::{
    check_gradients, gradcheck, relative_error, Differentiable, GradcheckReport, GroupCheck,
    ModelProblem, FD_STEP,
};
pub use sgd::{sgd_step, SgdState};
pub use train::{
    check_simplex, clip_global_norm, evaluate, fit, parse_kv, image_accuracy, train, train_with_observer, Evaluation,
    RngState, RunMetrics, StepEvent, TrainConfig, TrainOutcome, SIMPLEX_TOL,
};
