use proptest::prelude::*;

use layershare::model::{param_count, LnPlacement, Model, ModelConfig};
use layershare::share_plan::{block_usage_counts, build_assignment, parse_plan, render_plan, LayerAssignment, ShareStrategy};
use layershare::tensor::Tensor;
use layershare::train::{lr_schedule, SynthTask, TaskKind};

fn strategy() -> impl Strategy<Value = ShareStrategy> {
    prop_oneof![Just(ShareStrategy::Sequence), Just(ShareStrategy::Cycle), Just(ShareStrategy::CycleRev)]
}

/// (N, M, strategy) for which a plan exists.
fn valid_plan() -> impl Strategy<Value = (usize, usize, ShareStrategy)> {
    (1usize..=40, strategy()).prop_flat_map(|(n, s)| {
        let ms: Vec<usize> = (1..=n).filter(|m| s != ShareStrategy::Sequence || n % m == 0).collect();
        (Just(n), proptest::sample::select(ms), Just(s))
    })
}

fn plan(n: usize, m: usize, s: ShareStrategy) -> LayerAssignment {
    build_assignment(n, m, s).unwrap()
}

proptest! {
    #[test]
    fn every_block_is_used_and_layer_one_is_fresh((n, m, s) in valid_plan()) {
        let a = plan(n, m, s);
        let b = a.blocks();
        prop_assert_eq!(b.len(), n);
        prop_assert_eq!(b[0], 1);
        prop_assert_eq!(*b.iter().max().unwrap(), m);
        let counts = block_usage_counts(&a);
        prop_assert_eq!(counts.len(), m);
        prop_assert_eq!(counts.values().sum::<usize>(), n);
    }

    #[test]
    fn strategy_layouts((n, m, s) in valid_plan()) {
        let b = plan(n, m, s).blocks().to_vec();
        for i in 1..=n {
            let cycle = (i - 1) % m + 1;
            let want = match s {
                ShareStrategy::Sequence => (i - 1) / (n / m) + 1,
                ShareStrategy::Cycle => cycle,
                ShareStrategy::CycleRev if i <= m || i <= m * (n.div_ceil(m) - 1) => cycle,
                ShareStrategy::CycleRev => m - (i - 1) % m,
            };
            prop_assert_eq!(b[i - 1], want, "layer {}", i);
        }
    }

    #[test]
    fn plan_text_and_json_round_trip((n, m, s) in valid_plan()) {
        let a = plan(n, m, s);
        prop_assert_eq!(&parse_plan(&render_plan(&a), s).unwrap(), &a);
        prop_assert_eq!(&LayerAssignment::from_json(&a.to_json()).unwrap(), &a);
    }

    #[test]
    fn impossible_plans_are_rejected(n in 1usize..30, extra in 1usize..5, s in strategy()) {
        prop_assert!(build_assignment(n, n + extra, s).is_err());
        prop_assert!(build_assignment(0, 1, s).is_err());
        prop_assert!(build_assignment(n, 0, s).is_err());
    }

    #[test]
    fn indivisible_sequence_is_rejected(n in 2usize..40, m in 2usize..40) {
        prop_assume!(m <= n && n % m != 0);
        prop_assert!(build_assignment(n, m, ShareStrategy::Sequence).is_err());
    }

    #[test]
    fn count_depends_on_depth_only_through_admin(
        heads in 1usize..4, head_dim in 1usize..6, d_ff in 1usize..20, vocab in 4usize..30,
        m in 1usize..4, k1 in 1usize..4, k2 in 1usize..4, tie: bool, pre: bool, s in strategy(),
    ) {
        let base = ModelConfig {
            d_model: heads * head_dim,
            n_heads: heads,
            d_ff,
            vocab_size: vocab,
            tie_embeddings: tie,
            ln_placement: if pre { LnPlacement::Pre } else { LnPlacement::Post },
            admin: false,
            ..ModelConfig::default()
        };
        let shallow = param_count(&base.clone().with_depth(m * k1, m, s));
        let deep = param_count(&base.clone().with_depth(m * k2, m, s));
        prop_assert_eq!(shallow, deep);

        // Admin adds exactly one d-vector per residual branch per position.
        let admin = ModelConfig { admin: true, ..base.clone() }.with_depth(m * k2, m, s);
        let branches = 2 * m * k2 + 3 * m * k2;
        prop_assert_eq!(param_count(&admin), deep + branches * base.d_model);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn count_matches_built_store(m in 1usize..3, k in 1usize..3, tie: bool, admin: bool, s in strategy()) {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            vocab_size: 9,
            tie_embeddings: tie,
            admin,
            ..ModelConfig::default().with_depth(m * k, m, s)
        };
        let model = Model::<f32>::build(cfg.clone(), 0).unwrap();
        prop_assert_eq!(model.param_count(), param_count(&cfg));
        prop_assert_eq!(model.store.encoder.len(), m);
        prop_assert_eq!(model.store.decoder.len(), m);
    }
}

proptest! {
    #[test]
    fn tensor_data_matches_shape(dims in proptest::collection::vec(1usize..5, 1..4), delta in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f64>::new(&dims, vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f64>::new(&dims, vec![0.0; n + delta]).is_err());
    }

    #[test]
    fn schedule_peaks_at_warmup(warmup in 1usize..5000, d in 1usize..2048, step in 1usize..20000) {
        let peak = lr_schedule(warmup, d, warmup).unwrap();
        let lr = lr_schedule(step, d, warmup).unwrap();
        prop_assert!(lr > 0.0);
        prop_assert!(lr <= peak * (1.0 + 1e-12));
    }

    #[test]
    fn synthetic_targets_are_functions_of_the_source(
        kind in prop_oneof![Just(TaskKind::Copy), Just(TaskKind::Reverse), Just(TaskKind::Sort)],
        vocab in 5usize..40, lo in 1usize..6, span in 0usize..6, seed: u64, stream: u64, index: u64,
    ) {
        let task = SynthTask::new(kind, vocab, lo, lo + span, seed).unwrap();
        let e = task.example(stream, index);
        prop_assert_eq!(&e, &task.example(stream, index));
        prop_assert!((lo..=lo + span).contains(&e.src.len()));
        prop_assert!(e.src.iter().all(|&t| (3..vocab).contains(&t)));
        prop_assert_eq!(&e.tgt, &task.target_for(&e.src));
        let mut sorted = e.src.clone();
        sorted.sort_unstable();
        let mut got = e.tgt.clone();
        got.sort_unstable();
        prop_assert_eq!(got, sorted);
    }
}
