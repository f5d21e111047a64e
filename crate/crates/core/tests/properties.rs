use control_llm::expansion::{build_expansion_plan, expand_model, Strategy as Expansion};
use control_llm::interpolators::{
    lerp_combine, moe_select, DivergenceConfig, InterpolatorConfig, InterpolatorKind, InterpolatorState,
};
use control_llm::probe::{cosine, pca_project, silhouette};
use control_llm::tensor::Tensor;
use control_llm::training::{Split, TaskKind, TaskSpec, TrainConfig};
use control_llm::transformer::{forward, init_model, ModelSpec, TokenBatch};
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_with_every_component_reconstructs_centered_points(points in rows(7, 3)) {
        let pca = pca_project(&points, 3).unwrap();
        let d = 3;
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect();
        for (p, c) in points.iter().zip(&pca.coords) {
            for j in 0..d {
                let back: f64 = (0..3).map(|k| c[k] * pca.components[k][j]).sum();
                prop_assert!((back - (p[j] - mean[j])).abs() < 1e-8);
            }
        }
        let total: f64 = pca.explained_ratio.iter().sum();
        prop_assert!(total <= 1.0 + 1e-9);
        prop_assert!(pca.explained_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn silhouette_lies_in_unit_interval(points in rows(9, 2), labels in prop::collection::vec(0usize..3, 9)) {
        if let Some(s) = silhouette(&points, &labels) {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&b, &a));
    }

    #[test]
    fn lerp_stays_between_its_inputs(
        pre in prop::collection::vec(-5.0f32..5.0, 6),
        exp in prop::collection::vec(-5.0f32..5.0, 6),
        alpha in 0.0f64..=1.0,
    ) {
        let (a, b) = (Tensor::new(vec![6], pre).unwrap(), Tensor::new(vec![6], exp).unwrap());
        let out = lerp_combine(&a, &b, alpha).unwrap();
        for ((o, x), y) in out.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*o >= x.min(*y) - 1e-5 && *o <= x.max(*y) + 1e-5);
        }
    }

    #[test]
    fn moe_rows_come_from_one_branch(
        seed in any::<u64>(),
        gate in prop::collection::vec(-3.0f32..3.0, 8),
    ) {
        let (n, d) = (5, 4);
        let mk = |k: u64| Tensor::from_fn(&[n, d], |i| ((seed.wrapping_add(k * 977 + i as u64) % 101) as f32 - 50.0) / 7.0);
        let (input, pre, exp) = (mk(1), mk(2), mk(3));
        let mut state = InterpolatorState::identity(&InterpolatorConfig::new(InterpolatorKind::Moe), d).unwrap();
        state.set("w_g", Tensor::new(vec![d, 2], gate).unwrap()).unwrap();
        let (out, chosen) = moe_select(&input, &pre, &exp, &state).unwrap();
        for r in 0..n {
            let source = if chosen[r] == 0 { &pre } else { &exp };
            let same = out.row(r).iter().zip(source.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn schedule_is_bounded_and_decays_after_warmup(steps in 200usize..3000) {
        let s = TrainConfig::desk(steps).schedule();
        let lrs: Vec<f64> = (0..steps).map(|t| s.lr_at(t)).collect();
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l <= 1e-3 + 1e-15));
        prop_assert!(lrs[s.warmup.min(steps - 1)..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plan_expands_one_layer_per_group(n_layers in 1usize..40, period in 1usize..40) {
        let plan = build_expansion_plan(n_layers, period, Expansion::Concat, InterpolatorConfig::default(), DivergenceConfig::none());
        if period > n_layers {
            prop_assert!(plan.is_err());
        } else {
            let plan = plan.unwrap();
            prop_assert_eq!(plan.expanded.len(), n_layers / period);
            prop_assert!(plan.expanded.iter().all(|i| (i + 1) % period == 0));
        }
    }

    #[test]
    fn task_examples_are_pure_and_well_formed(seed in any::<u64>(), index in any::<u32>()) {
        for kind in [TaskKind::CopyReverse, TaskKind::Sort] {
            let task = TaskSpec::new(kind, seed);
            let e = task.example(Split::Test, index as u64);
            prop_assert_eq!(&e, &task.example(Split::Test, index as u64));
            prop_assert_eq!(e.sequence().len(), task.seq_len());
            let payload = &e.prompt[1..e.prompt.len() - 1];
            prop_assert_eq!(e.answer.clone(), kind.answer(payload));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn expansion_preserves_logits(seed in any::<u64>(), period in 1usize..=3, strategy in 0usize..3) {
        let spec = ModelSpec {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            d_ff: 12,
            max_seq_len: 6,
            seed,
        };
        let base = init_model(&spec).unwrap();
        let plan = build_expansion_plan(3, period, Expansion::ALL[strategy], InterpolatorConfig::default(), DivergenceConfig::none()).unwrap();
        let model = expand_model(&spec, &base, &plan).unwrap();
        let tokens = TokenBatch::new(2, 6, (0..12).map(|i| ((seed >> (i % 16)) % 16) as u32).collect()).unwrap();
        let (a, _) = forward(&model.view(), &tokens, false).unwrap();
        let (b, _) = forward(&control_llm::transformer::ModelView::base(&spec, &base), &tokens, false).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }
}
