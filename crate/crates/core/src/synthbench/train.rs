use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{branch_backward, check_dims, flatten, loss_and_upstream, ToyModel};
use super::suite::{SuiteSpec, SyntheticSuite};
use super::SynthError;
use crate::decomposer::{assemble, Activation, Branch, DecompositionPlan};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_TRAIN_SAMPLES: usize = 128;
pub const DEFAULT_EVAL_SAMPLES: usize = 512;
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Unified,
    Specialized,
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Unified => "unified",
            ModeKind::Specialized => "specialized",
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrainMode {
    Unified,
    Specialized(DecompositionPlan),
}

impl TrainMode {
    pub fn kind(&self) -> ModeKind {
        match self {
            TrainMode::Unified => ModeKind::Unified,
            TrainMode::Specialized(_) => ModeKind::Specialized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied to private branches.
    pub private_lr_mult: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            private_lr_mult: 1.0,
            train_samples: DEFAULT_TRAIN_SAMPLES,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            seed: crate::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: ModeKind,
    pub suite: SuiteSpec,
    pub config: TrainConfig,
    pub tasks: Vec<String>,
    /// Group index per task (all zero in unified mode).
    pub routing: Vec<usize>,
    /// Training loss per task after each step, starting at step 0.
    pub records: Vec<LossRecord>,
    /// Held-out loss per task at the end of training.
    pub final_losses: Vec<f64>,
    pub final_mean_loss: f64,
    /// Per-task cosine between its mean gradient and the mean gradient of
    /// the other tasks on the shared parameters, before and after training.
    pub similarity_before: Vec<f64>,
    pub similarity_after: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,task,loss\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.17e}\n", r.step, self.tasks[r.task], r.loss));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "suite": self.suite,
            "config": self.config,
            "tasks": self.tasks,
            "routing": self.routing,
            "initial_mean_loss": self.mean_loss_at(0),
            "final_losses": self.final_losses,
            "final_mean_loss": self.final_mean_loss,
            "similarity_before": self.similarity_before,
            "similarity_after": self.similarity_after,
        })
    }

    /// Mean training loss over tasks at `step`, if recorded.
    pub fn mean_loss_at(&self, step: usize) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.step == step).map(|r| r.loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trainable blocks plus which of them each task runs through.
struct Params {
    branches: Vec<Branch>,
    /// Active branch indices per task; index 0 is always the shared branch.
    active: Vec<Vec<usize>>,
    /// Group per task.
    group: Vec<usize>,
    n_groups: usize,
}

impl Params {
    fn output(&self, task: usize, x: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for &b in &self.active[task] {
            out += self.branches[b].forward(x, act);
        }
        out
    }
}

fn build_params(model: &ToyModel, suite: &SyntheticSuite, mode: &TrainMode) -> Result<Params, SynthError> {
    let n = suite.tasks.len();
    match mode {
        TrainMode::Unified => Ok(Params {
            branches: vec![model.probe.as_branch()],
            active: vec![vec![0]; n],
            group: vec![0; n],
            n_groups: 1,
        }),
        TrainMode::Specialized(plan) => {
            if plan.activation != model.activation {
                return Err(SynthError::Invalid(format!(
                    "plan activation {:?} differs from model activation {:?}",
                    plan.activation, model.activation
                )));
            }
            let (ffn, _) = assemble(&model.probe, plan, None)?;
            let mut group = Vec::with_capacity(n);
            for t in &suite.tasks {
                group.push(ffn.group_of(t)?);
            }
            let mut branches = vec![ffn.shared];
            branches.extend(ffn.private);
            Ok(Params {
                n_groups: branches.len() - 1,
                active: group.iter().map(|&g| vec![0, 1 + g]).collect(),
                branches,
                group,
            })
        }
    }
}

struct TaskData {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn task_data(model: &ToyModel, suite: &SyntheticSuite, n: usize, seed: u64, stream_base: u64) -> Vec<TaskData> {
    (0..suite.tasks.len())
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + t as u64);
            let (u, y) = suite.sample(t, n, &mut rng);
            TaskData { x: model.features(&u), y }
        })
        .collect()
}

/// Loss and gradients of every active branch for one task.
fn task_grads(
    p: &Params,
    model: &ToyModel,
    task: usize,
    d: &TaskData,
) -> (f64, Vec<(usize, DMatrix<f64>, DMatrix<f64>)>) {
    let out = p.output(task, &d.x, model.activation);
    let (loss, g) = loss_and_upstream(&model.head, &out, &d.y);
    let grads = p.active[task]
        .iter()
        .map(|&b| {
            let bg = branch_backward(&p.branches[b], model.activation, &d.x, &g);
            (b, bg.up, bg.down)
        })
        .collect();
    (loss, grads)
}

fn check_loss(step: usize, task: &str, loss: f64) -> Result<(), SynthError> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(SynthError::Diverged {
            step,
            task: task.to_string(),
            loss,
        });
    }
    Ok(())
}

/// Per-task cross-task cosine of the mean gradients on the shared branch.
fn shared_similarity(p: &Params, model: &ToyModel, data: &[TaskData]) -> Vec<f64> {
    let grads: Vec<Vec<f64>> = (0..data.len())
        .map(|t| {
            let (_, g) = task_grads(p, model, t, &data[t]);
            let (_, up, down) = g.into_iter().find(|(b, _, _)| *b == 0).expect("shared branch active");
            flatten(&[&up, &down])
        })
        .collect();
    cross_task_cosines(&grads)
}

/// For each task, the cosine between its gradient and the mean gradient of
/// all other tasks. Degenerate (zero-norm) cases count as zero.
pub fn cross_task_cosines(grads: &[Vec<f64>]) -> Vec<f64> {
    let n = grads.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let dim = grads[0].len();
    let mut total = vec![0.0; dim];
    for g in grads {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    grads
        .iter()
        .map(|g| {
            let others: Vec<f64> = total.iter().zip(g).map(|(t, v)| (t - v) / (n - 1) as f64).collect();
            crate::densela::cosine(g, &others).value
        })
        .collect()
}

/// Full-batch gradient descent on the probe block only. In specialized mode
/// the shared branch follows the mean of the per-group mean gradients and
/// each private branch follows its own group's mean gradient.
pub fn train(
    model: &ToyModel,
    suite: &SyntheticSuite,
    mode: &TrainMode,
    cfg: &TrainConfig,
) -> Result<TrainLog, SynthError> {
    check_dims(model, suite)?;
    validate_config(cfg)?;
    let (p, records) = descend(model, suite, mode, cfg)?;
    let n = suite.tasks.len();
    let eval_set = task_data(model, suite, cfg.eval_samples, cfg.seed, 3000);
    let mut final_losses = Vec::with_capacity(n);
    for t in 0..n {
        let out = p.output(t, &eval_set[t].x, model.activation);
        let loss = loss_and_upstream(&model.head, &out, &eval_set[t].y).0;
        check_loss(cfg.steps, &suite.tasks[t], loss)?;
        final_losses.push(loss);
    }
    let similarity_before = shared_similarity(&build_params(model, suite, mode)?, model, &eval_set);
    let similarity_after = shared_similarity(&p, model, &eval_set);
    Ok(TrainLog {
        mode: mode.kind(),
        suite: suite.spec.clone(),
        config: *cfg,
        tasks: suite.tasks.clone(),
        routing: p.group.clone(),
        records,
        final_mean_loss: final_losses.iter().sum::<f64>() / n as f64,
        final_losses,
        similarity_before,
        similarity_after,
    })
}

/// Unified training of the probe on the task mixture, returning the updated
/// model. Stands in for the pretrained starting point that both modes
/// fine-tune from.
pub fn pretrain(model: &ToyModel, suite: &SyntheticSuite, cfg: &TrainConfig) -> Result<ToyModel, SynthError> {
    check_dims(model, suite)?;
    validate_config(cfg)?;
    let cfg = TrainConfig {
        seed: cfg.seed ^ 0x5eed_0000_0000_0001,
        ..*cfg
    };
    let (p, _) = descend(model, suite, &TrainMode::Unified, &cfg)?;
    let mut out = model.clone();
    out.probe.w1 = p.branches[0].up.clone();
    out.probe.w2 = p.branches[0].down.clone();
    Ok(out)
}

fn validate_config(cfg: &TrainConfig) -> Result<(), SynthError> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(cfg.private_lr_mult >= 0.0 && cfg.private_lr_mult.is_finite()) {
        return Err(SynthError::Invalid("learning rates must be finite and >= 0".into()));
    }
    if cfg.train_samples == 0 || cfg.eval_samples == 0 {
        return Err(SynthError::Invalid("sample counts must be positive".into()));
    }
    Ok(())
}

fn descend(
    model: &ToyModel,
    suite: &SyntheticSuite,
    mode: &TrainMode,
    cfg: &TrainConfig,
) -> Result<(Params, Vec<LossRecord>), SynthError> {
    let mut p = build_params(model, suite, mode)?;
    let n = suite.tasks.len();
    let train_set = task_data(model, suite, cfg.train_samples, cfg.seed, 2000);
    let mut group_size = vec![0usize; p.n_groups];
    for &g in &p.group {
        group_size[g] += 1;
    }
    let n_active_groups = group_size.iter().filter(|&&c| c > 0).count() as f64;

    let mut records = Vec::with_capacity((cfg.steps + 1) * n);
    for step in 0..=cfg.steps {
        let mut acc: Vec<(DMatrix<f64>, DMatrix<f64>)> = p
            .branches
            .iter()
            .map(|b| (DMatrix::zeros(b.up.nrows(), b.up.ncols()), DMatrix::zeros(b.down.nrows(), b.down.ncols())))
            .collect();
        for t in 0..n {
            let (loss, grads) = task_grads(&p, model, t, &train_set[t]);
            check_loss(step, &suite.tasks[t], loss)?;
            records.push(LossRecord { step, task: t, loss });
            let w_group = 1.0 / group_size[p.group[t]] as f64;
            for (b, up, down) in grads {
                let w = if b == 0 { w_group / n_active_groups } else { w_group * cfg.private_lr_mult };
                acc[b].0 += up * w;
                acc[b].1 += down * w;
            }
        }
        if step == cfg.steps {
            break;
        }
        for (b, (gu, gd)) in p.branches.iter_mut().zip(acc) {
            b.up -= gu * cfg.lr;
            b.down -= gd * cfg.lr;
        }
    }
    Ok((p, records))
}

/// Per-task change in final cross-task gradient cosine, `b − a`.
pub fn similarity_delta(log_a: &TrainLog, log_b: &TrainLog) -> Result<Vec<f64>, SynthError> {
    if log_a.suite != log_b.suite || log_a.tasks != log_b.tasks {
        return Err(SynthError::Invalid("logs were produced on different suites".into()));
    }
    Ok(log_a
        .similarity_after
        .iter()
        .zip(&log_b.similarity_after)
        .map(|(a, b)| b - a)
        .collect())
}
