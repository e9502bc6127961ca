//! Shared/private decomposition of a feed-forward block.
//!
//! The unified block computes `act(x W1ᵀ) W2ᵀ`. Its equivalent map
//! `W2 W1` is factored by SVD: the leading `r` directions become the
//! shared branch (noise-padded to width `d_s`), and the remaining residual,
//! scaled per group by its energy share, seeds each private branch
//! (noise-padded to width `d_p`). Tokens of a task run through the shared
//! branch and their group's private branch; the two outputs are summed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{self, LinalgError};
use crate::gradbundle::{gdm, BundleError};
use crate::grouping::{GroupingError, GroupingPlan};
use crate::subspace::SubspaceReport;

pub const DEFAULT_NOISE_SCALE: f64 = 1e-4;
pub const DEFAULT_RANK_DIVISOR: usize = 4;
pub const FFN_MANIFEST: &str = "ffn.json";
pub const FFN_FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("decompose: shape mismatch: {0}")]
    Shape(String),
    #[error("decompose: invalid plan: {0}")]
    Plan(String),
    #[error("decompose: unknown task `{0}` (not in routing table)")]
    UnknownTask(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("decompose: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One up/down projection pair: `out = act(x upᵀ) downᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// `width × d_model`
    pub up: DMatrix<f64>,
    /// `d_model × width`
    pub down: DMatrix<f64>,
}

impl Branch {
    pub fn width(&self) -> usize {
        self.up.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
        let h = (x * self.up.transpose()).map(|z| act.apply(z));
        h * self.down.transpose()
    }

    /// `down · up`, the branch's linear map when the activation is identity.
    pub fn product(&self) -> DMatrix<f64> {
        &self.down * &self.up
    }
}

/// Unified feed-forward weights: `w1` is `d_ff × d_model`, `w2` is
/// `d_model × d_ff`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedFfnWeights {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

impl UnifiedFfnWeights {
    pub fn new(w1: DMatrix<f64>, w2: DMatrix<f64>) -> Result<Self, DecomposeError> {
        if w1.nrows() != w2.ncols() || w1.ncols() != w2.nrows() {
            return Err(DecomposeError::Shape(format!(
                "w1 is {}x{}, w2 is {}x{}; expected d_ff x d_model and d_model x d_ff",
                w1.nrows(),
                w1.ncols(),
                w2.nrows(),
                w2.ncols()
            )));
        }
        if w1.iter().chain(w2.iter()).any(|v| !v.is_finite()) {
            return Err(DecomposeError::Shape("non-finite weight".into()));
        }
        Ok(Self { w1, w2 })
    }

    pub fn d_model(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.nrows()
    }

    pub fn as_branch(&self) -> Branch {
        Branch {
            up: self.w1.clone(),
            down: self.w2.clone(),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
        self.as_branch().forward(x, act)
    }

    pub fn load(w1: &Path, w2: &Path) -> Result<Self, DecomposeError> {
        Self::new(gdm::read_dmatrix(w1)?, gdm::read_dmatrix(w2)?)
    }

    pub fn save(&self, w1: &Path, w2: &Path) -> Result<(), DecomposeError> {
        gdm::write_dmatrix(w1, &self.w1)?;
        gdm::write_dmatrix(w2, &self.w2)?;
        Ok(())
    }
}

/// Knobs for [`DecompositionPlan::new`] that are not analysis outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Shared truncation rank is `d_s / rank_divisor` unless overridden.
    pub rank_divisor: usize,
    pub shared_rank: Option<usize>,
    /// Private truncation rank; defaults to `d_p / N`.
    pub private_rank: Option<usize>,
    pub noise_scale: f64,
    pub seed: u64,
    pub activation: Activation,
    /// Scale private-init noise by `1 − mean off-diagonal rho`.
    pub cca_noise_scaling: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            rank_divisor: DEFAULT_RANK_DIVISOR,
            shared_rank: None,
            private_rank: None,
            noise_scale: DEFAULT_NOISE_SCALE,
            seed: crate::DEFAULT_SEED,
            activation: Activation::Silu,
            cca_noise_scaling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub grouping: GroupingPlan,
    pub shared_ratio: f64,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_s: usize,
    pub d_p: usize,
    pub p_g: Vec<f64>,
    pub r: usize,
    pub private_rank: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub activation: Activation,
    #[serde(default)]
    pub cca_noise_scaling: bool,
}

impl DecompositionPlan {
    /// Derives widths from the ratio: `d_s` is `round(ratio · d_ff)` rounded
    /// down until the remaining width splits evenly over the groups.
    pub fn new(
        grouping: GroupingPlan,
        shared_ratio: f64,
        p_g: Vec<f64>,
        d_model: usize,
        d_ff: usize,
        opts: PlanOptions,
    ) -> Result<Self, DecomposeError> {
        if !(shared_ratio > 0.0 && shared_ratio < 1.0) {
            return Err(DecomposeError::Plan(format!("shared ratio {shared_ratio} outside (0,1)")));
        }
        let n = grouping.groups.len();
        if n == 0 {
            return Err(DecomposeError::Plan("grouping has no groups".into()));
        }
        let mut d_s = (shared_ratio * d_ff as f64).round() as usize;
        while d_s > 0 && !(d_ff - d_s).is_multiple_of(n) {
            d_s -= 1;
        }
        if d_s == 0 || d_s >= d_ff {
            return Err(DecomposeError::Plan(format!(
                "d_ff = {d_ff} too small for ratio {shared_ratio} with {n} groups"
            )));
        }
        let d_p = (d_ff - d_s) / n;
        if opts.rank_divisor == 0 {
            return Err(DecomposeError::Plan("rank divisor must be positive".into()));
        }
        // Derived defaults are clamped to what the block can hold; explicit
        // overrides are validated as given.
        let r = opts.shared_rank.unwrap_or((d_s / opts.rank_divisor).max(1).min(d_model));
        let private_rank = opts.private_rank.unwrap_or((d_p / n).max(1).min(d_model));
        let plan = Self {
            grouping,
            shared_ratio,
            d_model,
            d_ff,
            d_s,
            d_p,
            p_g,
            r,
            private_rank,
            noise_scale: opts.noise_scale,
            seed: opts.seed,
            activation: opts.activation,
            cca_noise_scaling: opts.cca_noise_scaling,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn n_groups(&self) -> usize {
        self.grouping.groups.len()
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        let n = self.n_groups();
        let tasks = self.grouping.tasks();
        self.grouping.validate(&tasks)?;
        let fail = |m: String| Err(DecomposeError::Plan(m));
        if !(self.shared_ratio > 0.0 && self.shared_ratio < 1.0) {
            return fail(format!("shared ratio {} outside (0,1)", self.shared_ratio));
        }
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.d_s == 0 || self.d_p == 0 {
            return fail(format!("d_s = {}, d_p = {} must be positive", self.d_s, self.d_p));
        }
        if self.d_s + n * self.d_p != self.d_ff {
            return fail(format!(
                "d_s + N·d_p = {} + {}·{} != d_ff = {}",
                self.d_s, n, self.d_p, self.d_ff
            ));
        }
        if self.p_g.len() != n {
            return fail(format!("{} group energies for {n} groups", self.p_g.len()));
        }
        if self.p_g.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return fail("group energies must be finite and non-negative".into());
        }
        let sum: f64 = self.p_g.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("group energies sum to {sum}, expected 1"));
        }
        if self.r == 0 || self.r > self.d_model.min(self.d_s) {
            return fail(format!(
                "shared rank {} outside 1..={}",
                self.r,
                self.d_model.min(self.d_s)
            ));
        }
        if self.private_rank == 0 || self.private_rank > self.d_model.min(self.d_p) {
            return fail(format!(
                "private rank {} outside 1..={}",
                self.private_rank,
                self.d_model.min(self.d_p)
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise scale {} must be finite and >= 0", self.noise_scale));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DecomposeError> {
        let p: Self = serde_json::from_slice(bytes).map_err(|e| DecomposeError::Format(format!("plan: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// `W_equiv = W2 W1`, a `d_model × d_model` map.
pub fn equiv_weight(w: &UnifiedFfnWeights) -> DMatrix<f64> {
    &w.w2 * &w.w1
}

/// Shared factors: `w1_factor = U_r √Σ_r` (`d_model × d_s` after padding),
/// `w2_factor = √Σ_r V_rᵀ` (`d_s × d_model` after padding), and the
/// noise-free reconstruction `U_r Σ_r V_rᵀ`.
#[derive(Debug, Clone)]
pub struct SharedFactors {
    pub w1_factor: DMatrix<f64>,
    pub w2_factor: DMatrix<f64>,
    pub w_shared_equiv: DMatrix<f64>,
    pub sigma: Vec<f64>,
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

/// Splits the leading `rank` singular directions of `m` into symmetric
/// `√Σ` factors padded with noise to `width`: returns `(up, down)` with
/// `up` `width × cols` and `down` `rows × width`.
fn padded_factors(svd: &densela::SvdResult, rank: usize, width: usize, std: f64, rng: &mut ChaCha8Rng) -> Branch {
    let rows = svd.u.nrows();
    let cols = svd.v.nrows();
    let mut up = DMatrix::zeros(width, cols);
    let mut down = DMatrix::zeros(rows, width);
    for j in 0..rank {
        let s = svd.sigma[j].sqrt();
        for c in 0..cols {
            up[(j, c)] = s * svd.v[(c, j)];
        }
        for r in 0..rows {
            down[(r, j)] = svd.u[(r, j)] * s;
        }
    }
    // Padding: up rows first, then down columns, in row-major order.
    for j in rank..width {
        for c in 0..cols {
            up[(j, c)] = gaussian(rng, std);
        }
    }
    for r in 0..rows {
        for j in rank..width {
            down[(r, j)] = gaussian(rng, std);
        }
    }
    Branch { up, down }
}

pub fn shared_factors(w_equiv: &DMatrix<f64>, plan: &DecompositionPlan) -> Result<SharedFactors, DecomposeError> {
    if w_equiv.nrows() != plan.d_model || w_equiv.ncols() != plan.d_model {
        return Err(DecomposeError::Shape(format!(
            "equivalent weight is {}x{}, plan expects {}x{}",
            w_equiv.nrows(),
            w_equiv.ncols(),
            plan.d_model,
            plan.d_model
        )));
    }
    let svd = densela::svd(w_equiv)?;
    if plan.r > svd.rank_bound() {
        return Err(DecomposeError::Plan(format!(
            "shared rank {} exceeds rank bound {}",
            plan.r,
            svd.rank_bound()
        )));
    }
    let mut rng = noise_rng(plan.seed, 0);
    let b = padded_factors(&svd, plan.r, plan.d_s, plan.noise_scale, &mut rng);
    Ok(SharedFactors {
        w1_factor: b.down,
        w2_factor: b.up,
        w_shared_equiv: svd.truncated(plan.r),
        sigma: svd.sigma,
    })
}

pub fn residual(w_equiv: &DMatrix<f64>, w_shared_equiv: &DMatrix<f64>) -> Result<DMatrix<f64>, DecomposeError> {
    if w_equiv.shape() != w_shared_equiv.shape() {
        return Err(DecomposeError::Shape(format!(
            "{:?} vs {:?}",
            w_equiv.shape(),
            w_shared_equiv.shape()
        )));
    }
    Ok(w_equiv - w_shared_equiv)
}

/// Per-group private branches from the energy-weighted residual
/// `p_g · W_res`. Returns the branches and any warnings.
pub fn private_init(w_res: &DMatrix<f64>, plan: &DecompositionPlan) -> Result<(Vec<Branch>, Vec<String>), DecomposeError> {
    private_init_scaled(w_res, plan, plan.noise_scale)
}

fn private_init_scaled(
    w_res: &DMatrix<f64>,
    plan: &DecompositionPlan,
    noise: f64,
) -> Result<(Vec<Branch>, Vec<String>), DecomposeError> {
    if w_res.nrows() != plan.d_model || w_res.ncols() != plan.d_model {
        return Err(DecomposeError::Shape(format!(
            "residual is {}x{}, plan expects {}x{}",
            w_res.nrows(),
            w_res.ncols(),
            plan.d_model,
            plan.d_model
        )));
    }
    if plan.private_rank < 1 {
        return Err(DecomposeError::Plan("private rank must be >= 1".into()));
    }
    let mut warnings = Vec::new();
    let degenerate = densela::frobenius(w_res) < densela::ZERO_NORM;
    if degenerate {
        warnings.push("residual is zero; private branches use noise-only initialization".into());
    }
    let mut out = Vec::with_capacity(plan.n_groups());
    for (g, &p) in plan.p_g.iter().enumerate() {
        let mut rng = noise_rng(plan.seed, 1 + g as u64);
        let rank = if degenerate { 0 } else { plan.private_rank };
        let svd = densela::svd(&(w_res * p))?;
        out.push(padded_factors(&svd, rank, plan.d_p, noise, &mut rng));
    }
    Ok((out, warnings))
}

/// Shared + per-group private branches with a static task → group routing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializedFfn {
    pub d_model: usize,
    pub activation: Activation,
    pub shared: Branch,
    pub private: Vec<Branch>,
    pub routing: BTreeMap<String, usize>,
}

impl SpecializedFfn {
    pub fn group_of(&self, task: &str) -> Result<usize, DecomposeError> {
        self.routing
            .get(task)
            .copied()
            .ok_or_else(|| DecomposeError::UnknownTask(task.to_string()))
    }

    pub fn d_s(&self) -> usize {
        self.shared.width()
    }

    pub fn d_p(&self) -> usize {
        self.private.first().map_or(0, Branch::width)
    }

    /// Bit-level digest of all weights, routing and activation.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.activation).as_bytes());
        for (t, g) in &self.routing {
            h.update(t.as_bytes());
            h.update((*g as u64).to_le_bytes());
        }
        for b in std::iter::once(&self.shared).chain(&self.private) {
            for v in b.up.iter().chain(b.down.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        crate::gradbundle::to_hex(&h.finalize())
    }
}

/// Routed forward pass: `act(x W_sᵀ) W_s,downᵀ + act(x W_pgᵀ) W_pg,downᵀ`.
/// Equivalent to concatenating both hidden blocks and applying the
/// block-split down-projection.
pub fn forward(ffn: &SpecializedFfn, x: &DMatrix<f64>, task: &str) -> Result<DMatrix<f64>, DecomposeError> {
    let g = ffn.group_of(task)?;
    if x.ncols() != ffn.d_model {
        return Err(DecomposeError::Shape(format!(
            "input width {} != d_model {}",
            x.ncols(),
            ffn.d_model
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DecomposeError::Shape("non-finite input".into()));
    }
    Ok(ffn.shared.forward(x, ffn.activation) + ffn.private[g].forward(x, ffn.activation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeDiagnostics {
    pub equiv_sigma: Vec<f64>,
    pub residual_norm: f64,
    pub tail_norm: f64,
    pub shared_equiv_norm: f64,
    pub private_product_norms: Vec<f64>,
    pub private_noise_scale: f64,
    pub warnings: Vec<String>,
}

/// Runs equiv → shared factors → residual → private init and arranges the
/// factors into FFN up/down shapes with routing from the plan's grouping.
pub fn assemble(
    w: &UnifiedFfnWeights,
    plan: &DecompositionPlan,
    subspace: Option<&SubspaceReport>,
) -> Result<(SpecializedFfn, DecomposeDiagnostics), DecomposeError> {
    plan.validate()?;
    if w.d_model() != plan.d_model || w.d_ff() != plan.d_ff {
        return Err(DecomposeError::Shape(format!(
            "weights are d_model={}, d_ff={}; plan expects d_model={}, d_ff={}",
            w.d_model(),
            w.d_ff(),
            plan.d_model,
            plan.d_ff
        )));
    }
    let private_noise = if plan.cca_noise_scaling {
        let s = subspace.ok_or_else(|| {
            DecomposeError::Plan("cca noise scaling requires a subspace report".into())
        })?;
        plan.noise_scale * (1.0 - s.mean_offdiag_rho()).max(0.0)
    } else {
        plan.noise_scale
    };
    let w_equiv = equiv_weight(w);
    let shared = shared_factors(&w_equiv, plan)?;
    let w_res = residual(&w_equiv, &shared.w_shared_equiv)?;
    let (private, warnings) = private_init_scaled(&w_res, plan, private_noise)?;
    let mut routing = BTreeMap::new();
    for (g, members) in plan.grouping.groups.iter().enumerate() {
        for t in members {
            routing.insert(t.clone(), g);
        }
    }
    let tail_norm = shared.sigma.iter().skip(plan.r).map(|s| s * s).sum::<f64>().sqrt();
    let diag = DecomposeDiagnostics {
        residual_norm: densela::frobenius(&w_res),
        tail_norm,
        shared_equiv_norm: densela::frobenius(&shared.w_shared_equiv),
        private_product_norms: private.iter().map(|b| densela::frobenius(&b.product())).collect(),
        private_noise_scale: private_noise,
        equiv_sigma: shared.sigma,
        warnings,
    };
    let ffn = SpecializedFfn {
        d_model: plan.d_model,
        activation: plan.activation,
        shared: Branch {
            up: shared.w2_factor,
            down: shared.w1_factor,
        },
        private,
        routing,
    };
    Ok((ffn, diag))
}

/// Contents of `ffn.json` in a saved specialized block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfnManifest {
    pub version: String,
    pub d_model: usize,
    pub d_s: usize,
    pub d_p: usize,
    pub activation: Activation,
    pub routing: BTreeMap<String, usize>,
    pub shared: BranchFiles,
    pub private: Vec<BranchFiles>,
    pub plan: Option<DecompositionPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFiles {
    pub up: String,
    pub down: String,
}

impl FfnManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, DecomposeError> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| DecomposeError::Format(format!("ffn.json: {e}")))?;
        if m.version != FFN_FORMAT_VERSION {
            return Err(DecomposeError::Format(format!("ffn.json: unrecognized version `{}`", m.version)));
        }
        if m.private.is_empty() {
            return Err(DecomposeError::Format("ffn.json: no private branches".into()));
        }
        if let Some((t, g)) = m.routing.iter().find(|(_, g)| **g >= m.private.len()) {
            return Err(DecomposeError::Format(format!(
                "ffn.json: task `{t}` routed to missing group {g}"
            )));
        }
        for f in std::iter::once(&m.shared).chain(&m.private) {
            for name in [&f.up, &f.down] {
                let p = Path::new(name);
                if p.components().count() != 1 || !matches!(p.components().next(), Some(std::path::Component::Normal(_))) {
                    return Err(DecomposeError::Format(format!("ffn.json: `{name}` must be a plain file name")));
                }
            }
        }
        Ok(m)
    }
}

/// Writes the block as `.gdm` weight files plus `ffn.json`.
pub fn save_ffn(ffn: &SpecializedFfn, plan: Option<&DecompositionPlan>, dir: &Path) -> Result<(), DecomposeError> {
    fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    let write = |name: &str, m: &DMatrix<f64>| gdm::write_dmatrix(&dir.join(name), m);
    write("shared_up.gdm", &ffn.shared.up)?;
    write("shared_down.gdm", &ffn.shared.down)?;
    let mut private = Vec::new();
    for (g, b) in ffn.private.iter().enumerate() {
        let files = BranchFiles {
            up: format!("private_{g}_up.gdm"),
            down: format!("private_{g}_down.gdm"),
        };
        write(&files.up, &b.up)?;
        write(&files.down, &b.down)?;
        private.push(files);
    }
    let manifest = FfnManifest {
        version: FFN_FORMAT_VERSION.into(),
        d_model: ffn.d_model,
        d_s: ffn.d_s(),
        d_p: ffn.d_p(),
        activation: ffn.activation,
        routing: ffn.routing.clone(),
        shared: BranchFiles {
            up: "shared_up.gdm".into(),
            down: "shared_down.gdm".into(),
        },
        private,
        plan: plan.cloned(),
    };
    let path = dir.join(FFN_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| BundleError::io(&path, e).into())
}

pub fn load_ffn(dir: &Path) -> Result<SpecializedFfn, DecomposeError> {
    let path = dir.join(FFN_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| BundleError::io(&path, e))?;
    let m = FfnManifest::from_json(&bytes)?;
    let load = |f: &BranchFiles, width: usize| -> Result<Branch, DecomposeError> {
        let up = gdm::read_dmatrix(&dir.join(&f.up))?;
        let down = gdm::read_dmatrix(&dir.join(&f.down))?;
        if up.shape() != (width, m.d_model) || down.shape() != (m.d_model, width) {
            return Err(DecomposeError::Shape(format!(
                "branch {} / {} has shapes {:?} / {:?}, expected ({width}, {}) / ({}, {width})",
                f.up,
                f.down,
                up.shape(),
                down.shape(),
                m.d_model,
                m.d_model
            )));
        }
        Ok(Branch { up, down })
    };
    Ok(SpecializedFfn {
        d_model: m.d_model,
        activation: m.activation,
        shared: load(&m.shared, m.d_s)?,
        private: m
            .private
            .iter()
            .map(|f| load(f, m.d_p))
            .collect::<Result<_, _>>()?,
        routing: m.routing,
    })
}
