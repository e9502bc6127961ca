use gdps_core::decomposer::{
    assemble, forward, load_ffn, save_ffn, Activation, DecompositionPlan, PlanOptions, UnifiedFfnWeights,
};
use gdps_core::grouping::{GroupingMethod, GroupingPlan};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn grouping(groups: &[&[&str]]) -> GroupingPlan {
    GroupingPlan {
        method: GroupingMethod::Consensus,
        k: groups.len(),
        groups: groups.iter().map(|g| g.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

fn linear_opts() -> PlanOptions {
    PlanOptions {
        noise_scale: 0.0,
        activation: Activation::Identity,
        ..PlanOptions::default()
    }
}

#[test]
fn full_rank_single_group_reproduces_the_unified_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d_model, d_ff) = (8, 32);
    let w = UnifiedFfnWeights::new(random(d_ff, d_model, &mut rng), random(d_model, d_ff, &mut rng)).unwrap();
    let opts = PlanOptions {
        shared_rank: Some(d_model),
        ..linear_opts()
    };
    let plan = DecompositionPlan::new(grouping(&[&["a", "b"]]), 0.5, vec![1.0], d_model, d_ff, opts).unwrap();
    let (ffn, diag) = assemble(&w, &plan, None).unwrap();
    assert!(diag.residual_norm < 1e-8, "{}", diag.residual_norm);
    let x = random(100, d_model, &mut rng);
    let want = w.forward(&x, Activation::Identity);
    for task in ["a", "b"] {
        let got = forward(&ffn, &x, task).unwrap();
        let rel = (&got - &want).norm() / want.norm();
        assert!(rel <= 1e-8, "{task}: {rel:e}");
    }
}

#[test]
fn private_norms_follow_group_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d_model, d_ff) = (8, 32);
    let w = UnifiedFfnWeights::new(random(d_ff, d_model, &mut rng), random(d_model, d_ff, &mut rng)).unwrap();
    for (pa, pb) in [(0.7, 0.3), (0.55, 0.45), (0.9, 0.1)] {
        let plan = DecompositionPlan::new(
            grouping(&[&["a"], &["b", "c"]]),
            0.5,
            vec![pa, pb],
            d_model,
            d_ff,
            linear_opts(),
        )
        .unwrap();
        let (ffn, diag) = assemble(&w, &plan, None).unwrap();
        let norms: Vec<f64> = ffn.private.iter().map(|b| b.product().norm()).collect();
        assert!((norms[0] / norms[1] - pa / pb).abs() <= 1e-8 * (pa / pb));
        assert!((diag.private_product_norms[0] - norms[0]).abs() < 1e-12);
    }
}

#[test]
fn routing_selects_the_groups_private_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = UnifiedFfnWeights::new(random(16, 4, &mut rng), random(4, 16, &mut rng)).unwrap();
    let plan = DecompositionPlan::new(grouping(&[&["a"], &["b"]]), 0.5, vec![0.5, 0.5], 4, 16, linear_opts())
        .unwrap();
    let (ffn, _) = assemble(&w, &plan, None).unwrap();
    let x = random(5, 4, &mut rng);
    for (task, g) in [("a", 0), ("b", 1)] {
        let want = ffn.shared.forward(&x, Activation::Identity) + ffn.private[g].forward(&x, Activation::Identity);
        assert!((forward(&ffn, &x, task).unwrap() - want).norm() < 1e-12);
    }
}

#[test]
fn assembly_is_deterministic_and_survives_save_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = UnifiedFfnWeights::new(random(16, 4, &mut rng), random(4, 16, &mut rng)).unwrap();
    let opts = PlanOptions {
        noise_scale: 1e-3,
        seed: 9,
        ..PlanOptions::default()
    };
    let plan = DecompositionPlan::new(grouping(&[&["a"], &["b"]]), 0.75, vec![0.4, 0.6], 4, 16, opts).unwrap();
    let (a, _) = assemble(&w, &plan, None).unwrap();
    let (b, _) = assemble(&w, &plan, None).unwrap();
    assert_eq!(a, b);

    let back = DecompositionPlan::from_json(plan.to_json().as_bytes()).unwrap();
    assert_eq!(back, plan);

    let dir = tempfile::tempdir().unwrap();
    save_ffn(&a, Some(&plan), dir.path()).unwrap();
    let loaded = load_ffn(dir.path()).unwrap();
    // Weights are stored as f32.
    let x = random(3, 4, &mut rng);
    let diff = (forward(&loaded, &x, "b").unwrap() - forward(&a, &x, "b").unwrap()).norm();
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn mismatched_weights_are_shape_errors() {
    let w = UnifiedFfnWeights::new(DMatrix::zeros(16, 4), DMatrix::zeros(4, 16)).unwrap();
    let plan = DecompositionPlan::new(grouping(&[&["a"], &["b"]]), 0.5, vec![0.5, 0.5], 8, 16, linear_opts())
        .unwrap();
    let err = assemble(&w, &plan, None).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('8'), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn larger_energy_never_gets_a_smaller_private_branch(seed in 0u64..10_000, pa in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = UnifiedFfnWeights::new(random(16, 6, &mut rng), random(6, 16, &mut rng)).unwrap();
        let plan = DecompositionPlan::new(
            grouping(&[&["a"], &["b"]]), 0.5, vec![pa, 1.0 - pa], 6, 16, linear_opts(),
        ).unwrap();
        let (ffn, _) = assemble(&w, &plan, None).unwrap();
        let (na, nb) = (ffn.private[0].product().norm(), ffn.private[1].product().norm());
        if pa > 0.5 {
            prop_assert!(na >= nb);
        } else {
            prop_assert!(nb >= na);
        }
    }

    #[test]
    fn branch_shapes_follow_the_plan(ratio_idx in 0usize..3, groups in 1usize..4, seed in 0u64..100) {
        let ratio = [0.25, 0.5, 0.75][ratio_idx];
        let names: Vec<String> = (0..groups).map(|g| format!("t{g}")).collect();
        let g = GroupingPlan {
            method: GroupingMethod::Consensus,
            k: groups,
            groups: names.iter().map(|n| vec![n.clone()]).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = UnifiedFfnWeights::new(random(32, 8, &mut rng), random(8, 32, &mut rng)).unwrap();
        let p = vec![1.0 / groups as f64; groups];
        let plan = DecompositionPlan::new(g, ratio, p, 8, 32, PlanOptions::default()).unwrap();
        let (ffn, _) = assemble(&w, &plan, None).unwrap();
        prop_assert_eq!(ffn.shared.up.shape(), (plan.d_s, 8));
        prop_assert_eq!(ffn.shared.down.shape(), (8, plan.d_s));
        prop_assert_eq!(plan.d_s + groups * plan.d_p, 32);
        prop_assert!(plan.d_s as f64 <= ratio * 32.0);
        for b in &ffn.private {
            prop_assert_eq!(b.up.shape(), (plan.d_p, 8));
        }
    }
}
