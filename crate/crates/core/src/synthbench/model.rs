use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::suite::{Dims, SyntheticSuite};
use super::SynthError;
use crate::decomposer::{Activation, Branch, UnifiedFfnWeights};
use crate::gradbundle::{GradientBundle, GradientMatrix, LayerDecl};

pub const PROBE_LAYER: &str = "probe";

/// Frozen trunk and head around a trainable probe feed-forward block:
/// `y = head · probe(trunk · u)` with `probe(x) = down · act(up · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: Dims,
    /// `d_model × d_in`
    pub trunk: DMatrix<f64>,
    /// `d_out × d_model`
    pub head: DMatrix<f64>,
    pub probe: UnifiedFfnWeights,
    pub activation: Activation,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Random matrix with orthonormal rows or columns (whichever is shorter).
fn semi_orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if rows >= cols {
        gaussian(rows, cols, 1.0, rng).qr().q()
    } else {
        gaussian(cols, rows, 1.0, rng).qr().q().transpose()
    }
}

impl ToyModel {
    /// Trunk and head are semi-orthogonal; the probe up-projection has unit
    /// pre-activation scale and the down-projection starts small.
    pub fn new(dims: Dims, activation: Activation, seed: u64) -> Result<Self, SynthError> {
        if [dims.d_in, dims.d_model, dims.d_ff, dims.d_out].contains(&0) {
            return Err(SynthError::Invalid(format!("degenerate dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let trunk = semi_orthogonal(dims.d_model, dims.d_in, &mut rng);
        let head = semi_orthogonal(dims.d_out, dims.d_model, &mut rng);
        // Orthogonal rows scaled so pre-activations have unit variance.
        let w1 = semi_orthogonal(dims.d_ff, dims.d_model, &mut rng)
            * ((dims.d_ff as f64) / (dims.d_model as f64)).sqrt().max(1.0);
        let w2 = gaussian(dims.d_model, dims.d_ff, 0.1 / (dims.d_ff as f64).sqrt(), &mut rng);
        Ok(Self {
            dims,
            trunk,
            head,
            probe: UnifiedFfnWeights::new(w1, w2).map_err(|e| SynthError::Invalid(e.to_string()))?,
            activation,
        })
    }

    pub fn features(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        u * self.trunk.transpose()
    }

    pub fn n_probe_params(&self) -> usize {
        2 * self.dims.d_ff * self.dims.d_model
    }

    /// Probe weights flattened as `[up row-major, down row-major]`.
    pub fn flat_probe(&self) -> Vec<f64> {
        flatten(&[&self.probe.w1, &self.probe.w2])
    }

    pub fn set_flat_probe(&mut self, theta: &[f64]) {
        let n = self.dims.d_ff * self.dims.d_model;
        self.probe.w1 = DMatrix::from_row_slice(self.dims.d_ff, self.dims.d_model, &theta[..n]);
        self.probe.w2 = DMatrix::from_row_slice(self.dims.d_model, self.dims.d_ff, &theta[n..]);
    }
}

pub(crate) fn flatten(ms: &[&DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in ms {
        for i in 0..m.nrows() {
            out.extend(m.row(i).iter());
        }
    }
    out
}

/// Gradients of one branch given the upstream gradient `g_out` of the
/// block output (`batch × d_model`).
#[derive(Debug, Clone)]
pub struct BranchGrad {
    pub up: DMatrix<f64>,
    pub down: DMatrix<f64>,
}

pub(crate) fn branch_backward(b: &Branch, act: Activation, x: &DMatrix<f64>, g_out: &DMatrix<f64>) -> BranchGrad {
    let z = x * b.up.transpose();
    let a = z.map(|v| act.apply(v));
    let down = g_out.transpose() * &a;
    let mut ga = g_out * &b.down;
    ga.zip_apply(&z, |g, zv| *g *= act.derivative(zv));
    let up = ga.transpose() * x;
    BranchGrad { up, down }
}

/// Mean-over-rows loss `½‖y − y*‖²` of the model output given per-branch
/// sum already formed, plus the upstream gradient w.r.t. the block output.
pub(crate) fn loss_and_upstream(
    head: &DMatrix<f64>,
    block_out: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let pred = block_out * head.transpose();
    let r = pred - y;
    let n = y.nrows() as f64;
    let loss = 0.5 * r.norm_squared() / n;
    (loss, (r * head) / n)
}

/// Mean loss of the unified probe on `(u, y)`.
pub fn probe_loss(model: &ToyModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let out = model.probe.forward(&model.features(u), model.activation);
    loss_and_upstream(&model.head, &out, y).0
}

/// Per-sample gradients of `½‖y_i − y*_i‖²` with respect to the flattened
/// probe weights, one row per sample.
pub fn per_sample_gradients(model: &ToyModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let x = model.features(u);
    let branch = model.probe.as_branch();
    let out = branch.forward(&x, model.activation);
    let mut rows = Vec::with_capacity(u.nrows());
    for i in 0..u.nrows() {
        let xi = x.rows(i, 1).into_owned();
        let (_, g) = loss_and_upstream(&model.head, &out.rows(i, 1).into_owned(), &y.rows(i, 1).into_owned());
        let bg = branch_backward(&branch, model.activation, &xi, &g);
        rows.push(flatten(&[&bg.up, &bg.down]));
    }
    let p = model.n_probe_params();
    DMatrix::from_row_iterator(rows.len(), p, rows.into_iter().flatten())
}

/// Draws `n_samples` fresh samples of `task` and returns their per-sample
/// probe gradients.
pub fn analytic_gradients(
    model: &ToyModel,
    suite: &SyntheticSuite,
    task: &str,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientMatrix, SynthError> {
    if n_samples == 0 {
        return Err(SynthError::Invalid("n_samples must be positive".into()));
    }
    check_dims(model, suite)?;
    let t = suite.task_index(task)?;
    let (u, y) = suite.sample(t, n_samples, rng);
    let g = per_sample_gradients(model, &u, &y);
    Ok(GradientMatrix::from_dmatrix(task, PROBE_LAYER, &g)?)
}

pub(crate) fn check_dims(model: &ToyModel, suite: &SyntheticSuite) -> Result<(), SynthError> {
    if model.dims != suite.spec.dims {
        return Err(SynthError::Invalid(format!(
            "model dims {:?} do not match suite dims {:?}",
            model.dims, suite.spec.dims
        )));
    }
    Ok(())
}

/// Gradient snapshot of every task at the probe block.
pub fn collect_bundle(
    model: &ToyModel,
    suite: &SyntheticSuite,
    n_samples: usize,
    seed: u64,
) -> Result<GradientBundle, SynthError> {
    let mut mats = Vec::with_capacity(suite.tasks.len());
    for (i, t) in suite.tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + i as u64);
        mats.push(analytic_gradients(model, suite, t, n_samples, &mut rng)?);
    }
    Ok(GradientBundle::new(
        suite.tasks.clone(),
        vec![LayerDecl {
            name: PROBE_LAYER.into(),
            cols: model.n_probe_params(),
        }],
        mats,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::suite::{make_suite, SuiteSpec};

    #[test]
    fn zero_everything_gives_zero_gradients() {
        let mut spec = SuiteSpec::new(vec![1, 1], 30.0, 1);
        spec.noise = 0.0;
        let mut suite = make_suite(spec).unwrap();
        for t in suite.targets.iter_mut() {
            t.fill(0.0);
        }
        let mut model = ToyModel::new(suite.spec.dims, Activation::Identity, 2).unwrap();
        model.probe.w1.fill(0.0);
        model.probe.w2.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = analytic_gradients(&model, &suite, "t0", 5, &mut rng).unwrap();
        assert_eq!(g.rows(), 5);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trunk_and_head_are_semi_orthogonal() {
        let m = ToyModel::new(Dims::default(), Activation::Silu, 5).unwrap();
        let tt = m.trunk.transpose() * &m.trunk;
        assert!((tt - DMatrix::identity(16, 16)).norm() < 1e-10);
        let hh = &m.head * m.head.transpose();
        assert!((hh - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn bundle_has_one_row_per_sample() {
        let suite = make_suite(SuiteSpec::new(vec![1, 2], 45.0, 3)).unwrap();
        let model = ToyModel::new(suite.spec.dims, Activation::Silu, 3).unwrap();
        let b = collect_bundle(&model, &suite, 7, 11).unwrap();
        assert_eq!(b.tasks().len(), 3);
        let m = b.sample_gradients("t2", PROBE_LAYER).unwrap();
        assert_eq!((m.rows(), m.cols()), (7, model.n_probe_params()));
        assert!(collect_bundle(&model, &suite, 7, 11).unwrap() == b);
    }
}
