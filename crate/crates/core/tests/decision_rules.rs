use gdps_core::conflict::{
    conflict_report, cross_similarity, layer_conflict, map_shared_ratio, self_similarity, ConflictConfig,
    RatioThresholds,
};
use gdps_core::gradbundle::{GradientBundle, GradientMatrix, LayerDecl};
use gdps_core::grouping::{
    consensus_from_similarity, kmeans, single_linkage, DistanceMatrix, GroupingMethod, GroupingPlan,
    SimilarityMatrix,
};
use gdps_core::pipeline::{run_plan, PlanConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn ratio_map_cases_are_exact() {
    let t = RatioThresholds::default();
    for (delta, want) in [(0.075, 0.50), (0.04, 0.75), (0.05, 0.50), (0.15, 0.25), (0.20, 0.25)] {
        assert_eq!(map_shared_ratio(delta, &t), want, "delta {delta}");
    }
}

proptest! {
    #[test]
    fn ratio_map_is_a_non_increasing_step(a in -1.0f64..2.0, b in -1.0f64..2.0) {
        let t = RatioThresholds::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (map_shared_ratio(lo, &t), map_shared_ratio(hi, &t));
        prop_assert!([0.75, 0.50, 0.25].contains(&rl));
        prop_assert!(rh <= rl);
    }
}

/// Four tasks with bem isolated; entries other than bem–gle and aeb–est
/// are constructed to complete the matrix.
fn published_distances() -> DMatrix<f64> {
    // order: bem, aeb, est, gle
    let d = [
        [0.0, 0.262, 0.255, 0.243],
        [0.262, 0.0, 0.157, 0.181],
        [0.255, 0.157, 0.0, 0.174],
        [0.243, 0.181, 0.174, 0.0],
    ];
    DMatrix::from_fn(4, 4, |i, j| d[i][j])
}

#[test]
fn published_distance_fixture_isolates_bem() {
    let tasks = names(&["bem", "aeb", "est", "gle"]);
    let dist = DistanceMatrix::new(tasks.clone(), published_distances()).unwrap();
    let link = single_linkage(&dist, 2).unwrap();
    assert_eq!(link.plan.groups, vec![names(&["bem"]), names(&["aeb", "est", "gle"])]);
    assert_eq!(link.merges[0].distance, 0.157);

    let sim = SimilarityMatrix {
        tasks,
        s: published_distances().map(|d| 1.0 - d),
        degenerate_pairs: 0,
    };
    let o = consensus_from_similarity(sim, 2, 2343).unwrap();
    assert!(o.agree);
    assert_eq!(o.plan.method, GroupingMethod::Consensus);
    assert_eq!(o.plan.groups, vec![names(&["bem"]), names(&["aeb", "est", "gle"])]);
}

fn inertia(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
            .collect();
        for p in members {
            total += p.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    total
}

fn planted_profiles(seed: u64) -> (Vec<String>, DistanceMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
    let group = [0, 0, 1, 1, 1, 0];
    let mut d = DMatrix::zeros(6, 6);
    for i in 0..6 {
        for j in (i + 1)..6 {
            let base = if group[i] == group[j] { 0.1 } else { 0.8 };
            let v = base + rng.random_range(0.0..0.05);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    (tasks.clone(), DistanceMatrix::new(tasks, d).unwrap())
}

#[test]
fn kmeans_matches_exhaustive_minimum_inertia_partition() {
    for seed in 0..20 {
        let (tasks, dist) = planted_profiles(seed);
        let points = dist.profiles();
        let mut best = (f64::INFINITY, vec![]);
        // Task 0 is pinned to label 0; every other assignment is tried.
        for mask in 0u32..(1 << 5) {
            let labels: Vec<usize> = std::iter::once(0).chain((0..5).map(|b| ((mask >> b) & 1) as usize)).collect();
            let e = inertia(&points, &labels, 2);
            if e < best.0 {
                best = (e, labels);
            }
        }
        let km = kmeans(&points, 2, seed).unwrap();
        let got = GroupingPlan::from_labels(&tasks, &km.assignments, GroupingMethod::Kmeans);
        let want = GroupingPlan::from_labels(&tasks, &best.1, GroupingMethod::Kmeans);
        assert!(got.same_partition(&want), "seed {seed}: {:?} vs {:?}", got.groups, want.groups);
        assert!((km.inertia - best.0).abs() < 1e-12);
        assert_eq!(got.groups, vec![names(&["t0", "t1", "t5"]), names(&["t2", "t3", "t4"])]);
    }
}

/// Single linkage via Kruskal: cut the `k − 1` longest minimum spanning
/// tree edges.
fn kruskal_partition(d: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = d.nrows();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((d[(i, j)], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let mut components = n;
    for (_, i, j) in edges {
        if components == k {
            break;
        }
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

#[test]
fn single_linkage_matches_spanning_tree_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
        let d = DMatrix::from_fn(6, 6, |i, j| {
            ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
        });
        let tasks: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
        let dist = DistanceMatrix::new(tasks.clone(), d.clone()).unwrap();
        for k in 1..=6 {
            let got = single_linkage(&dist, k).unwrap().plan;
            let want = GroupingPlan::from_labels(&tasks, &kruskal_partition(&d, k), GroupingMethod::Hierarchical);
            assert!(got.same_partition(&want), "k={k}: {:?} vs {:?}", got.groups, want.groups);
        }
    }
}

fn bundle(rows: &[(&str, Vec<Vec<f64>>)]) -> GradientBundle {
    let cols = rows[0].1[0].len();
    let mats = rows
        .iter()
        .map(|(t, r)| {
            let m = DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]);
            GradientMatrix::from_dmatrix(*t, "ffn", &m).unwrap()
        })
        .collect();
    GradientBundle::new(
        rows.iter().map(|(t, _)| t.to_string()).collect(),
        vec![LayerDecl { name: "ffn".into(), cols }],
        mats,
    )
    .unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn similarities_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..7).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect()).collect()
        };
        let (na, nb, nc) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
        let data = [("a", draw(&mut rng, na)), ("b", draw(&mut rng, nb)), ("c", draw(&mut rng, nc))];
        let b = bundle(&data);
        let mut selfs = Vec::new();
        for (t, rows) in &data {
            let mut acc = Vec::new();
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    acc.push(cos(&rows[i], &rows[j]));
                }
            }
            let want = acc.iter().sum::<f64>() / acc.len() as f64;
            assert!((self_similarity(&b, t, "ffn").unwrap() - want).abs() < 1e-12);
            selfs.push(want);
        }
        let mut crosses = Vec::new();
        for x in 0..3 {
            for y in (x + 1)..3 {
                let mut acc = Vec::new();
                for r in &data[x].1 {
                    for s in &data[y].1 {
                        acc.push(cos(r, s));
                    }
                }
                let want = acc.iter().sum::<f64>() / acc.len() as f64;
                assert!((cross_similarity(&b, data[x].0, data[y].0, "ffn").unwrap() - want).abs() < 1e-12);
                crosses.push(want);
            }
        }
        let lc = layer_conflict(&b, "ffn", &ConflictConfig::default()).unwrap();
        let s_self = selfs.iter().sum::<f64>() / 3.0;
        let s_cross = crosses.iter().sum::<f64>() / 3.0;
        assert!((lc.s_self - s_self).abs() < 1e-12);
        assert!((lc.s_cross - s_cross).abs() < 1e-12);
        assert!((lc.delta - (s_self - s_cross)).abs() < 1e-12);
    }
}

/// Unit samples `sqrt(s)·c_t + sqrt(1−s)·e_k` with private directions
/// `e_k`, and task centers pairwise at cosine `rho`. Within-task cosine is
/// `s`, cross-task cosine `s·rho`, so delta is `s(1 − rho)`.
fn calibrated_bundle(s: f64, rho: f64, samples: usize) -> GradientBundle {
    let tasks = ["bem", "aeb", "est", "gle"];
    let dim = 1 + tasks.len() + tasks.len() * samples;
    let mut data = Vec::new();
    for (t, name) in tasks.iter().enumerate() {
        let mut center = vec![0.0; dim];
        center[0] = rho.sqrt();
        center[1 + t] = (1.0 - rho).sqrt();
        let rows = (0..samples)
            .map(|k| {
                let mut v: Vec<f64> = center.iter().map(|c| c * s.sqrt()).collect();
                v[1 + tasks.len() + t * samples + k] = (1.0 - s).sqrt();
                v
            })
            .collect();
        data.push((*name, rows));
    }
    bundle(&data)
}

#[test]
fn calibrated_fixture_lands_on_half_sharing() {
    let b = calibrated_bundle(0.5, 0.85, 3);
    let r = conflict_report(&b, &["ffn".to_string()], &RatioThresholds::default(), &ConflictConfig::default()).unwrap();
    assert!((r.delta - 0.075).abs() < 1e-6, "{}", r.delta);
    assert_eq!(r.shared_ratio, 0.50);

    let out = run_plan(&b, &PlanConfig::default()).unwrap();
    assert_eq!(out.plan.shared_ratio, 0.50);
    assert_eq!(out.plan.d_s, 16);
}
