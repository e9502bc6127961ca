//! Planted-conflict multi-task regression problems and a tiny model with a
//! trainable probe block, used to check the analysis end to end.

mod model;
mod sim;
mod suite;
mod train;

pub use model::{
    analytic_gradients, collect_bundle, per_sample_gradients, probe_loss, ToyModel, PROBE_LAYER,
};
pub use sim::{run_seed, simulate, ModeSelect, SeedRun, SimConfig, SimSummary};
pub use suite::{make_suite, task_name, Dims, SuiteSpec, SyntheticSuite};
pub use train::{
    cross_task_cosines, pretrain, similarity_delta, train, LossRecord, ModeKind, TrainConfig, TrainLog, TrainMode,
    DEFAULT_EVAL_SAMPLES, DEFAULT_LR, DEFAULT_STEPS, DEFAULT_TRAIN_SAMPLES, DIVERGENCE_LOSS,
};

use thiserror::Error;

use crate::decomposer::DecomposeError;
use crate::gradbundle::BundleError;
use crate::pipeline::{run_plan, PipelineError, PlanConfig, PlanOutcome};

/// Gradient samples per task when deriving a plan for a suite.
pub const DEFAULT_GRADIENT_SAMPLES: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthbench: {0}")]
    Invalid(String),
    #[error("synthbench: unknown task `{0}`")]
    UnknownTask(String),
    #[error("synthbench: training diverged at step {step} on task `{task}` (loss {loss:e})")]
    Diverged { step: usize, task: String, loss: f64 },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Collects a gradient bundle from the untrained model and runs the full
/// analysis on it. The plan's FFN dimensions are taken from the model.
pub fn plan_for_suite(
    model: &ToyModel,
    suite: &SyntheticSuite,
    n_samples: usize,
    cfg: &PlanConfig,
) -> Result<PlanOutcome, SynthError> {
    let bundle = collect_bundle(model, suite, n_samples, cfg.seed)?;
    let mut cfg = cfg.clone();
    cfg.d_model = model.dims.d_model;
    cfg.d_ff = model.dims.d_ff;
    cfg.options.activation = model.activation;
    Ok(run_plan(&bundle, &cfg)?)
}
