//! Task grouping from mean-gradient directions: similarity and distance
//! matrices, k-means over distance profiles, single-linkage agglomeration
//! and their consensus.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::cosine;
use crate::gradbundle::{BundleError, GradientBundle};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("grouping: k = {k} is invalid for {n} tasks")]
    InvalidK { k: usize, n: usize },
    #[error("grouping: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tasks: Vec<String>,
    #[serde(with = "crate::serde_mat")]
    pub s: DMatrix<f64>,
    /// Off-diagonal pairs where a mean gradient had zero norm.
    pub degenerate_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub tasks: Vec<String>,
    #[serde(with = "crate::serde_mat")]
    pub d: DMatrix<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, zero diagonal and the `[0, 2]` range.
    pub fn new(tasks: Vec<String>, d: DMatrix<f64>) -> Result<Self, GroupingError> {
        let n = tasks.len();
        if d.nrows() != n || d.ncols() != n {
            return Err(GroupingError::Invalid(format!(
                "distance matrix is {}x{} for {n} tasks",
                d.nrows(),
                d.ncols()
            )));
        }
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(GroupingError::Invalid(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let v = d[(i, j)];
                if !(0.0..=2.0).contains(&v) {
                    return Err(GroupingError::Invalid(format!("distance {v} at ({i},{j}) outside [0,2]")));
                }
                if (v - d[(j, i)]).abs() > 1e-12 {
                    return Err(GroupingError::Invalid(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { tasks, d })
    }

    /// Each task's row of distances, used as its k-means feature vector.
    pub fn profiles(&self) -> Vec<Vec<f64>> {
        (0..self.tasks.len())
            .map(|i| self.d.row(i).iter().copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMethod {
    Kmeans,
    Hierarchical,
    Consensus,
}

/// A partition of tasks into sharing groups. Groups are ordered by their
/// earliest member in task order; members keep task order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub method: GroupingMethod,
    pub k: usize,
    pub groups: Vec<Vec<String>>,
}

impl GroupingPlan {
    /// Builds a canonical plan from per-task labels.
    pub fn from_labels(tasks: &[String], labels: &[usize], method: GroupingMethod) -> Self {
        let mut order: Vec<usize> = Vec::new();
        for &l in labels {
            if !order.contains(&l) {
                order.push(l);
            }
        }
        let groups = order
            .iter()
            .map(|&l| {
                tasks
                    .iter()
                    .zip(labels)
                    .filter(|(_, &x)| x == l)
                    .map(|(t, _)| t.clone())
                    .collect()
            })
            .collect::<Vec<Vec<String>>>();
        Self {
            method,
            k: groups.len(),
            groups,
        }
    }

    pub fn single_group(tasks: &[String], method: GroupingMethod) -> Self {
        Self {
            method,
            k: 1,
            groups: vec![tasks.to_vec()],
        }
    }

    pub fn group_of(&self, task: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.iter().any(|t| t == task))
    }

    pub fn tasks(&self) -> Vec<String> {
        self.groups.iter().flatten().cloned().collect()
    }

    /// Checks that the plan is an exact partition of `tasks` with no empty
    /// group and `k` matching the group count.
    pub fn validate(&self, tasks: &[String]) -> Result<(), GroupingError> {
        if self.k != self.groups.len() || self.k == 0 {
            return Err(GroupingError::Invalid(format!(
                "k = {} but {} groups",
                self.k,
                self.groups.len()
            )));
        }
        if self.groups.iter().any(|g| g.is_empty()) {
            return Err(GroupingError::Invalid("empty group".into()));
        }
        let mut seen = BTreeSet::new();
        for t in self.groups.iter().flatten() {
            if !seen.insert(t.as_str()) {
                return Err(GroupingError::Invalid(format!("task `{t}` appears twice")));
            }
        }
        let want: BTreeSet<&str> = tasks.iter().map(String::as_str).collect();
        if seen != want {
            return Err(GroupingError::Invalid(
                "grouping does not cover exactly the bundle's tasks".into(),
            ));
        }
        Ok(())
    }

    /// Order-insensitive partition equality.
    pub fn same_partition(&self, other: &GroupingPlan) -> bool {
        partition_key(&self.groups) == partition_key(&other.groups)
    }
}

fn partition_key(groups: &[Vec<String>]) -> BTreeSet<BTreeSet<String>> {
    groups
        .iter()
        .map(|g| g.iter().cloned().collect())
        .collect()
}

/// Cosine similarity between task mean gradients at `layer`.
pub fn similarity_matrix(bundle: &GradientBundle, layer: &str) -> Result<SimilarityMatrix, GroupingError> {
    let tasks = bundle.tasks().to_vec();
    let means = tasks
        .iter()
        .map(|t| bundle.mean_gradient(t, layer))
        .collect::<Result<Vec<_>, _>>()?;
    let n = tasks.len();
    let mut s = DMatrix::identity(n, n);
    let mut degenerate_pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine(&means[i], &means[j]);
            if c.degenerate {
                degenerate_pairs += 1;
            }
            s[(i, j)] = c.value;
            s[(j, i)] = c.value;
        }
    }
    Ok(SimilarityMatrix {
        tasks,
        s,
        degenerate_pairs,
    })
}

/// `d = 1 − s` with an exact zero diagonal.
pub fn to_distance(sim: &SimilarityMatrix) -> DistanceMatrix {
    let n = sim.tasks.len();
    let d = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 - sim.s[(i, j)] });
    DistanceMatrix {
        tasks: sim.tasks.clone(),
        d,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansState {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster labels, canonicalized by first appearance.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| sq_dist(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> KmeansState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    counts[c] = 1;
                    assignments[i] = c;
                    centroids[c] = points[i].clone();
                }
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KmeansState {
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_history: history,
    }
}

fn canonicalize(mut state: KmeansState) -> KmeansState {
    let mut order: Vec<usize> = Vec::new();
    for &a in &state.assignments {
        if !order.contains(&a) {
            order.push(a);
        }
    }
    for c in 0..state.centroids.len() {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    state.centroids = order.iter().map(|&c| state.centroids[c].clone()).collect();
    state.assignments = state
        .assignments
        .iter()
        .map(|a| order.iter().position(|o| o == a).unwrap())
        .collect();
    state
}

/// Lloyd's k-means with k-means++ seeding; best of
/// [`KMEANS_RESTARTS`] seeded restarts by inertia (earliest restart on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansState, GroupingError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(GroupingError::InvalidK { k, n });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(GroupingError::Invalid("feature vectors differ in length".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GroupingError::Invalid("non-finite feature value".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..KMEANS_RESTARTS).map(|_| master.random()).collect();
    let runs: Vec<KmeansState> = seeds.par_iter().map(|&s| lloyd(points, k, s)).collect();
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart");
    Ok(canonicalize(best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub distance: f64,
}

/// Single-linkage result with its merge history (dendrogram).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linkage {
    pub plan: GroupingPlan,
    pub merges: Vec<Merge>,
}

/// Agglomerative clustering with `d(A, B) = min_{a∈A, b∈B} d(a, b)`, merging
/// until `k` clusters remain. Equal distances resolve to the pair whose
/// smallest task identifiers sort first.
pub fn single_linkage(dist: &DistanceMatrix, k: usize) -> Result<Linkage, GroupingError> {
    let n = dist.tasks.len();
    if k == 0 || k > n {
        return Err(GroupingError::InvalidK { k, n });
    }
    let tasks = &dist.tasks;
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let key = |c: &[usize]| c.iter().map(|&i| tasks[i].as_str()).min().unwrap().to_string();
    let mut merges = Vec::new();
    while clusters.len() > k {
        let mut best: Option<(f64, (String, String), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| dist.d[(i, j)])
                    .fold(f64::INFINITY, f64::min);
                let (ka, kb) = (key(&clusters[a]), key(&clusters[b]));
                let pair = if ka <= kb { (ka, kb) } else { (kb, ka) };
                let better = match &best {
                    None => true,
                    Some((bd, bp, _, _)) => d < *bd || (d == *bd && pair < *bp),
                };
                if better {
                    best = Some((d, pair, a, b));
                }
            }
        }
        let (d, _, a, b) = best.expect("more than k clusters");
        let names = |c: &[usize]| c.iter().map(|&i| tasks[i].clone()).collect::<Vec<_>>();
        merges.push(Merge {
            left: names(&clusters[a]),
            right: names(&clusters[b]),
            distance: d,
        });
        let right = clusters.remove(b);
        clusters[a].extend(right);
        clusters[a].sort_unstable();
    }
    let mut labels = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c;
        }
    }
    Ok(Linkage {
        plan: GroupingPlan::from_labels(tasks, &labels, GroupingMethod::Hierarchical),
        merges,
    })
}

/// Outcome of running both clustering methods on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub plan: GroupingPlan,
    pub agree: bool,
    pub kmeans_plan: GroupingPlan,
    pub kmeans_inertia: f64,
    pub linkage: Linkage,
    pub similarity: SimilarityMatrix,
    pub distance: DistanceMatrix,
    pub warnings: Vec<String>,
}

/// Runs k-means on distance profiles and single linkage on the distance
/// matrix. Agreement yields a `consensus` plan; otherwise the hierarchical
/// partition is returned with a warning.
pub fn consensus_group(
    bundle: &GradientBundle,
    layer: &str,
    k: usize,
    seed: u64,
) -> Result<ConsensusOutcome, GroupingError> {
    let similarity = similarity_matrix(bundle, layer)?;
    consensus_from_similarity(similarity, k, seed)
}

pub fn consensus_from_similarity(
    similarity: SimilarityMatrix,
    k: usize,
    seed: u64,
) -> Result<ConsensusOutcome, GroupingError> {
    let distance = to_distance(&similarity);
    let tasks = distance.tasks.clone();
    let km = kmeans(&distance.profiles(), k, seed)?;
    let kmeans_plan = GroupingPlan::from_labels(&tasks, &km.assignments, GroupingMethod::Kmeans);
    let linkage = single_linkage(&distance, k)?;
    let agree = kmeans_plan.same_partition(&linkage.plan);
    let mut warnings = Vec::new();
    if similarity.degenerate_pairs > 0 {
        warnings.push(format!(
            "{} task pair(s) had a zero-norm mean gradient; their similarity is set to 0",
            similarity.degenerate_pairs
        ));
    }
    let plan = if agree {
        GroupingPlan {
            method: GroupingMethod::Consensus,
            ..linkage.plan.clone()
        }
    } else {
        warnings.push(format!(
            "k-means partition {:?} disagrees with single linkage {:?}; using hierarchical",
            kmeans_plan.groups, linkage.plan.groups
        ));
        linkage.plan.clone()
    };
    Ok(ConsensusOutcome {
        plan,
        agree,
        kmeans_plan,
        kmeans_inertia: km.inertia,
        linkage,
        similarity,
        distance,
        warnings,
    })
}
