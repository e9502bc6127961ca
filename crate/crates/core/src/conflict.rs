//! Self-task vs. cross-task per-sample gradient alignment, the conflict
//! score and its mapping onto a shared-width ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::ZERO_NORM;
use crate::gradbundle::{BundleError, GradientBundle, GradientMatrix};

pub const DEFAULT_SAMPLE_CAP: usize = 512;
/// Fraction of degenerate pairs above which a report carries a warning.
pub const DEGENERATE_WARN_FRACTION: f64 = 0.10;

pub const PURITY_DEFINITION: &str =
    "fraction of cross-task sample pairs with cosine >= 0 (tool-defined, not a published formula)";

#[derive(Debug, Error)]
pub enum ConflictError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("conflict: task `{task}` has {rows} sample(s) at layer `{layer}`; at least 2 required")]
    TooFewSamples { task: String, layer: String, rows: usize },
    #[error("conflict: at least 2 tasks required, bundle has {0}")]
    TooFewTasks(usize),
    #[error("conflict: candidate layer set is empty")]
    EmptyCandidates,
    #[error("conflict: candidate layer `{0}` has no report")]
    UnknownCandidate(String),
    #[error("conflict: every {kind} pair at layer `{layer}` is degenerate (zero-norm gradients)")]
    AllDegenerate { kind: &'static str, layer: String },
    #[error("conflict: invalid thresholds: {0}")]
    Thresholds(String),
}

/// Breakpoints and ratios of the piecewise shared-ratio rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioThresholds {
    pub low: f64,
    pub high: f64,
    pub ratios: [f64; 3],
}

impl Default for RatioThresholds {
    fn default() -> Self {
        Self {
            low: 0.05,
            high: 0.15,
            ratios: [0.75, 0.50, 0.25],
        }
    }
}

impl RatioThresholds {
    pub fn new(low: f64, high: f64) -> Result<Self, ConflictError> {
        let t = Self {
            low,
            high,
            ..Self::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ConflictError> {
        if !(self.low > 0.0 && self.low < self.high && self.high.is_finite()) {
            return Err(ConflictError::Thresholds(format!(
                "need 0 < low < high, got {} / {}",
                self.low, self.high
            )));
        }
        let r = self.ratios;
        if !(r[0] > r[1] && r[1] > r[2] && r.iter().all(|v| *v > 0.0 && *v < 1.0)) {
            return Err(ConflictError::Thresholds(format!(
                "ratios must be strictly decreasing in (0,1), got {r:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBranch {
    /// `delta < low`
    BelowLow,
    /// `low <= delta < high`
    Middle,
    /// `delta >= high`
    AtOrAboveHigh,
}

impl RatioBranch {
    pub fn describe(&self, t: &RatioThresholds) -> String {
        match self {
            RatioBranch::BelowLow => format!("delta < {} -> {}", t.low, t.ratios[0]),
            RatioBranch::Middle => format!("{} <= delta < {} -> {}", t.low, t.high, t.ratios[1]),
            RatioBranch::AtOrAboveHigh => format!("delta >= {} -> {}", t.high, t.ratios[2]),
        }
    }
}

pub fn ratio_branch(delta: f64, t: &RatioThresholds) -> RatioBranch {
    if delta < t.low {
        RatioBranch::BelowLow
    } else if delta < t.high {
        RatioBranch::Middle
    } else {
        RatioBranch::AtOrAboveHigh
    }
}

/// Piecewise step rule; negative deltas fall in the first branch.
pub fn map_shared_ratio(delta: f64, t: &RatioThresholds) -> f64 {
    match ratio_branch(delta, t) {
        RatioBranch::BelowLow => t.ratios[0],
        RatioBranch::Middle => t.ratios[1],
        RatioBranch::AtOrAboveHigh => t.ratios[2],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictConfig {
    /// Per-task sample cap for the pairwise loops; larger tasks are
    /// uniformly subsampled.
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            sample_cap: DEFAULT_SAMPLE_CAP,
            seed: crate::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConflict {
    pub layer: String,
    pub s_self: f64,
    pub s_cross: f64,
    pub delta: f64,
    pub purity: f64,
    pub self_pairs: usize,
    pub cross_pairs: usize,
    pub degenerate_pairs: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct PairStats {
    sum: f64,
    count: usize,
    nonneg: usize,
    degenerate: usize,
}

impl PairStats {
    fn push(&mut self, c: Option<f64>) {
        match c {
            Some(v) => {
                self.sum += v;
                self.count += 1;
                if v >= 0.0 {
                    self.nonneg += 1;
                }
            }
            None => self.degenerate += 1,
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Unit-normalized rows; `None` marks a zero-norm sample.
struct UnitRows(Vec<Option<Vec<f64>>>);

impl UnitRows {
    fn from_matrix(m: &GradientMatrix, keep: Option<&[usize]>) -> Self {
        let idx: Vec<usize> = match keep {
            Some(k) => k.to_vec(),
            None => (0..m.rows()).collect(),
        };
        UnitRows(
            idx.into_iter()
                .map(|i| {
                    let row = m.row_f64(i);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (norm >= ZERO_NORM).then(|| row.iter().map(|v| v / norm).collect())
                })
                .collect(),
        )
    }

    fn len(&self) -> usize {
        self.0.len()
    }
}

fn unit_cos(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(
            a.iter()
                .zip(b)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .clamp(-1.0, 1.0),
        ),
        _ => None,
    }
}

fn self_stats(rows: &UnitRows) -> PairStats {
    let mut st = PairStats::default();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            st.push(unit_cos(&rows.0[i], &rows.0[j]));
        }
    }
    st
}

fn cross_stats(a: &UnitRows, b: &UnitRows) -> PairStats {
    let mut st = PairStats::default();
    for ra in &a.0 {
        for rb in &b.0 {
            st.push(unit_cos(ra, rb));
        }
    }
    st
}

/// Mean cosine over all unordered pairs of distinct samples of one task.
/// Zero-norm samples are excluded.
pub fn self_similarity(bundle: &GradientBundle, task: &str, layer: &str) -> Result<f64, ConflictError> {
    let m = bundle.sample_gradients(task, layer)?;
    if m.rows() < 2 {
        return Err(ConflictError::TooFewSamples {
            task: task.into(),
            layer: layer.into(),
            rows: m.rows(),
        });
    }
    self_stats(&UnitRows::from_matrix(m, None))
        .mean()
        .ok_or_else(|| ConflictError::AllDegenerate {
            kind: "self-task",
            layer: layer.into(),
        })
}

/// Mean cosine over the full cross product of two tasks' samples.
pub fn cross_similarity(
    bundle: &GradientBundle,
    task_a: &str,
    task_b: &str,
    layer: &str,
) -> Result<f64, ConflictError> {
    let a = UnitRows::from_matrix(bundle.sample_gradients(task_a, layer)?, None);
    let b = UnitRows::from_matrix(bundle.sample_gradients(task_b, layer)?, None);
    cross_stats(&a, &b)
        .mean()
        .ok_or_else(|| ConflictError::AllDegenerate {
            kind: "cross-task",
            layer: layer.into(),
        })
}

fn capped_rows(m: &GradientMatrix, cap: usize, seed: u64, salt: u64) -> UnitRows {
    if m.rows() <= cap {
        return UnitRows::from_matrix(m, None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut keep = rand::seq::index::sample(&mut rng, m.rows(), cap).into_vec();
    keep.sort_unstable();
    UnitRows::from_matrix(m, Some(&keep))
}

/// Outer expectations: `s_self` averages per-task self similarity over
/// tasks, `s_cross` averages cross similarity over unordered task pairs.
pub fn layer_conflict(
    bundle: &GradientBundle,
    layer: &str,
    cfg: &ConflictConfig,
) -> Result<LayerConflict, ConflictError> {
    let tasks = bundle.tasks();
    if tasks.len() < 2 {
        return Err(ConflictError::TooFewTasks(tasks.len()));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for (ti, t) in tasks.iter().enumerate() {
        let m = bundle.sample_gradients(t, layer)?;
        if m.rows() < 2 {
            return Err(ConflictError::TooFewSamples {
                task: t.clone(),
                layer: layer.into(),
                rows: m.rows(),
            });
        }
        rows.push(capped_rows(m, cfg.sample_cap.max(2), cfg.seed, ti as u64));
    }

    let self_st: Vec<PairStats> = rows.par_iter().map(self_stats).collect();
    let pairs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|a| ((a + 1)..tasks.len()).map(move |b| (a, b)))
        .collect();
    let cross_st: Vec<PairStats> = pairs
        .par_iter()
        .map(|&(a, b)| cross_stats(&rows[a], &rows[b]))
        .collect();

    let mut self_means = Vec::new();
    for st in &self_st {
        self_means.push(st.mean().ok_or_else(|| ConflictError::AllDegenerate {
            kind: "self-task",
            layer: layer.into(),
        })?);
    }
    let mut cross_means = Vec::new();
    for st in &cross_st {
        cross_means.push(st.mean().ok_or_else(|| ConflictError::AllDegenerate {
            kind: "cross-task",
            layer: layer.into(),
        })?);
    }
    let s_self = self_means.iter().sum::<f64>() / self_means.len() as f64;
    let s_cross = cross_means.iter().sum::<f64>() / cross_means.len() as f64;
    let cross_pairs: usize = cross_st.iter().map(|s| s.count).sum();
    let nonneg: usize = cross_st.iter().map(|s| s.nonneg).sum();
    Ok(LayerConflict {
        layer: layer.into(),
        s_self,
        s_cross,
        delta: s_self - s_cross,
        purity: nonneg as f64 / cross_pairs as f64,
        self_pairs: self_st.iter().map(|s| s.count).sum(),
        cross_pairs,
        degenerate_pairs: self_st
            .iter()
            .chain(&cross_st)
            .map(|s| s.degenerate)
            .sum(),
    })
}

/// Mean of per-layer deltas over the candidate layers.
pub fn aggregate_delta(reports: &[LayerConflict], candidates: &[String]) -> Result<f64, ConflictError> {
    if candidates.is_empty() {
        return Err(ConflictError::EmptyCandidates);
    }
    let mut sum = 0.0;
    for c in candidates {
        let r = reports
            .iter()
            .find(|r| &r.layer == c)
            .ok_or_else(|| ConflictError::UnknownCandidate(c.clone()))?;
        sum += r.delta;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLayer {
    pub layer: String,
    pub score: f64,
    pub conflict: LayerConflict,
}

/// Sorts layers by bottleneck score (delta) descending; ties go to lower
/// purity, then layer identifier.
pub fn rank_conflicts(conflicts: &[LayerConflict]) -> Vec<RankedLayer> {
    let mut ranked: Vec<RankedLayer> = conflicts
        .iter()
        .map(|c| RankedLayer {
            layer: c.layer.clone(),
            score: c.delta,
            conflict: c.clone(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.conflict.purity.partial_cmp(&b.conflict.purity).unwrap())
            .then(a.layer.cmp(&b.layer))
    });
    ranked
}

pub fn rank_layers(
    bundle: &GradientBundle,
    layers: &[String],
    cfg: &ConflictConfig,
) -> Result<Vec<RankedLayer>, ConflictError> {
    if layers.is_empty() {
        return Err(ConflictError::EmptyCandidates);
    }
    let conflicts = layers
        .iter()
        .map(|l| layer_conflict(bundle, l, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_conflicts(&conflicts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub layers: Vec<LayerConflict>,
    pub ranking: Vec<String>,
    pub candidate_layers: Vec<String>,
    pub delta: f64,
    pub shared_ratio: f64,
    pub branch: RatioBranch,
    pub branch_rule: String,
    pub thresholds: RatioThresholds,
    pub purity_definition: String,
    pub warnings: Vec<String>,
}

/// Computes per-layer conflicts for `candidates`, aggregates delta and maps
/// it to a shared ratio.
pub fn conflict_report(
    bundle: &GradientBundle,
    candidates: &[String],
    thresholds: &RatioThresholds,
    cfg: &ConflictConfig,
) -> Result<ConflictReport, ConflictError> {
    thresholds.validate()?;
    if candidates.is_empty() {
        return Err(ConflictError::EmptyCandidates);
    }
    let layers = candidates
        .iter()
        .map(|l| layer_conflict(bundle, l, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let delta = aggregate_delta(&layers, candidates)?;
    let branch = ratio_branch(delta, thresholds);
    let mut warnings = Vec::new();
    for l in &layers {
        let total = l.self_pairs + l.cross_pairs + l.degenerate_pairs;
        if l.degenerate_pairs as f64 > DEGENERATE_WARN_FRACTION * total as f64 {
            warnings.push(format!(
                "layer `{}`: {} of {} sample pairs are degenerate (zero-norm gradients)",
                l.layer, l.degenerate_pairs, total
            ));
        }
    }
    if bundle
        .tasks()
        .iter()
        .any(|t| bundle.sample_gradients(t, &candidates[0]).is_ok_and(|m| m.rows() > cfg.sample_cap))
    {
        warnings.push(format!(
            "tasks above {} samples were uniformly subsampled (seed {})",
            cfg.sample_cap, cfg.seed
        ));
    }
    Ok(ConflictReport {
        ranking: rank_conflicts(&layers).into_iter().map(|r| r.layer).collect(),
        layers,
        candidate_layers: candidates.to_vec(),
        delta,
        shared_ratio: map_shared_ratio(delta, thresholds),
        branch,
        branch_rule: branch.describe(thresholds),
        thresholds: *thresholds,
        purity_definition: PURITY_DEFINITION.into(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradbundle::LayerDecl;

    fn bundle(tasks: &[(&str, Vec<Vec<f32>>)]) -> GradientBundle {
        let d = tasks[0].1[0].len();
        let mats = tasks
            .iter()
            .map(|(t, rows)| {
                GradientMatrix::new(*t, "l", rows.len(), d, rows.concat()).unwrap()
            })
            .collect();
        GradientBundle::new(
            tasks.iter().map(|(t, _)| t.to_string()).collect(),
            vec![LayerDecl { name: "l".into(), cols: d }],
            mats,
        )
        .unwrap()
    }

    #[test]
    fn ratio_mapping_branches() {
        let t = RatioThresholds::default();
        assert_eq!(map_shared_ratio(0.075, &t), 0.50);
        assert_eq!(map_shared_ratio(0.05, &t), 0.50);
        assert_eq!(map_shared_ratio(0.15, &t), 0.25);
        assert_eq!(map_shared_ratio(0.04, &t), 0.75);
        assert_eq!(map_shared_ratio(0.20, &t), 0.25);
        assert_eq!(map_shared_ratio(-0.3, &t), 0.75);
    }

    #[test]
    fn thresholds_validation() {
        assert!(RatioThresholds::new(0.1, 0.05).is_err());
        assert!(RatioThresholds::new(0.0, 0.05).is_err());
        assert!(RatioThresholds::new(0.02, 0.3).is_ok());
    }

    #[test]
    fn self_similarity_examples() {
        let b = bundle(&[("a", vec![vec![1.0, 2.0]; 3]), ("b", vec![vec![1.0, 0.0], vec![0.0, 1.0]])]);
        assert!((self_similarity(&b, "a", "l").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(self_similarity(&b, "b", "l").unwrap(), 0.0);
        let one = bundle(&[("a", vec![vec![1.0, 2.0]])]);
        assert!(matches!(
            self_similarity(&one, "a", "l"),
            Err(ConflictError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn cross_similarity_examples() {
        let b = bundle(&[("a", vec![vec![1.0, 0.0]; 2]), ("b", vec![vec![1.0, 0.0]; 3])]);
        assert_eq!(cross_similarity(&b, "a", "b", "l").unwrap(), 1.0);
        let b = bundle(&[("a", vec![vec![2.0, 0.0]; 2]), ("b", vec![vec![-1.0, 0.0]; 3])]);
        assert_eq!(cross_similarity(&b, "a", "b", "l").unwrap(), -1.0);
        assert!(cross_similarity(&b, "a", "zz", "l").is_err());
    }

    #[test]
    fn no_conflict_layer() {
        let b = bundle(&[("a", vec![vec![0.3, 0.4]; 3]), ("b", vec![vec![0.3, 0.4]; 4])]);
        let lc = layer_conflict(&b, "l", &ConflictConfig::default()).unwrap();
        assert_eq!(lc.delta, 0.0);
        assert_eq!(lc.purity, 1.0);
        assert!((lc.s_self - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pairs_are_excluded_and_counted() {
        let b = bundle(&[
            ("a", vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]),
            ("b", vec![vec![1.0, 0.0], vec![1.0, 0.0]]),
        ]);
        let lc = layer_conflict(&b, "l", &ConflictConfig::default()).unwrap();
        assert_eq!(lc.s_self, 1.0);
        // a: 2 of 3 self pairs degenerate; cross: 2 of 6 degenerate.
        assert_eq!(lc.degenerate_pairs, 4);
        let rep = conflict_report(&b, &["l".into()], &RatioThresholds::default(), &ConflictConfig::default())
            .unwrap();
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn aggregate_examples() {
        let mk = |l: &str, d: f64| LayerConflict {
            layer: l.into(),
            s_self: d,
            s_cross: 0.0,
            delta: d,
            purity: 1.0,
            self_pairs: 1,
            cross_pairs: 1,
            degenerate_pairs: 0,
        };
        let r = vec![mk("x", 0.07), mk("y", 0.08), mk("z", 0.0), mk("w", 0.2)];
        assert_eq!(aggregate_delta(&r, &["x".into()]).unwrap(), 0.07);
        assert!((aggregate_delta(&r, &["x".into(), "y".into()]).unwrap() - 0.075).abs() < 1e-15);
        assert!((aggregate_delta(&r, &["z".into(), "w".into()]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(aggregate_delta(&r, &[]), Err(ConflictError::EmptyCandidates)));
        assert!(aggregate_delta(&r, &["q".into()]).is_err());
    }

    #[test]
    fn ranking_order_and_tie_break() {
        let mk = |l: &str, d: f64, p: f64| LayerConflict {
            layer: l.into(),
            s_self: 0.5,
            s_cross: 0.5 - d,
            delta: d,
            purity: p,
            self_pairs: 1,
            cross_pairs: 1,
            degenerate_pairs: 0,
        };
        let r = rank_conflicts(&[mk("a", 0.02, 0.5), mk("b", 0.10, 0.9)]);
        assert_eq!(r[0].layer, "b");
        let r = rank_conflicts(&[mk("a", 0.05, 0.9), mk("b", 0.05, 0.7)]);
        assert_eq!(r[0].layer, "b");
        let r = rank_conflicts(&[mk("b", 0.05, 0.7), mk("a", 0.05, 0.7)]);
        assert_eq!(r[0].layer, "a");
    }

    #[test]
    fn subsampling_is_seeded() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![1.0, i as f32]).collect();
        let b = bundle(&[("a", rows.clone()), ("b", rows)]);
        let cfg = ConflictConfig { sample_cap: 5, seed: 9 };
        let x = layer_conflict(&b, "l", &cfg).unwrap();
        let y = layer_conflict(&b, "l", &cfg).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.self_pairs, 2 * 10);
    }
}
