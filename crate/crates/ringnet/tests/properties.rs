//! Randomized invariants over the public surface: config round trips,
//! annealing profiles, ranking-metric bounds, dataset construction, and
//! click-count sampling.

use std::collections::BTreeMap;

use proptest::prelude::*;

use ringnet::config::{
    Builder, DatasetConfig, EvalOptions, ExperimentConfig, ModelConfigSection, ModelKind,
    PoolSource,
};
use ringnet::data::builders::{build_dataset1, build_dataset2};
use ringnet::data::clickthrough::{sample_click_counts, ClickthroughSynthSpec};
use ringnet::data::synth::{synth_pool_uniform, SynthSpec};
use ringnet::eval::{dcg25, rank_by_scores, Judgment};
use ringnet::optim::{EtaDecay, RingSchedule, SgdHyper};

fn arb_builder() -> impl Strategy<Value = Builder> {
    prop_oneof![
        Just(Builder::Dataset1),
        Just(Builder::Dataset2),
        Just(Builder::Dataset3),
        Just(Builder::Clickthrough),
    ]
}

fn arb_kind() -> impl Strategy<Value = ModelKind> {
    prop_oneof![
        Just(ModelKind::Binary),
        Just(ModelKind::Multiclass),
        Just(ModelKind::Multitask),
    ]
}

fn arb_decay() -> impl Strategy<Value = EtaDecay> {
    prop_oneof![
        Just(EtaDecay::Linear),
        (0.05f64..0.95).prop_map(|factor| EtaDecay::Multiplicative { factor }),
    ]
}

prop_compose! {
    fn arb_config()(
        builder in arb_builder(),
        kind in arb_kind(),
        decay in arb_decay(),
        scale in 1usize..100,
        data_seed in any::<u64>(),
        model_seed in any::<u64>(),
        rounds in 1usize..40,
        train_queries in 0usize..30,
        name in "[a-z][a-z0-9-]{0,12}",
    ) -> ExperimentConfig {
        ExperimentConfig {
            name,
            dataset: DatasetConfig {
                builder,
                scale,
                seed: data_seed,
                pool: Some(PoolSource::Synth {
                    spec: SynthSpec { seed: data_seed, ..SynthSpec::default() },
                    train_per_class: 50,
                    test_per_class: 10,
                }),
                clickthrough: Some(ClickthroughSynthSpec {
                    seed: data_seed,
                    ..ClickthroughSynthSpec::default()
                }),
                train_queries,
            },
            model: ModelConfigSection {
                kind,
                arch: ringnet::config::Arch::Cifar,
                seed: model_seed,
            },
            optimizer: SgdHyper::default(),
            schedule: RingSchedule {
                rounds,
                eta_s_zero_round: rounds + 1,
                eta_s_decay: decay,
                ..RingSchedule::default()
            },
            eval: EvalOptions::default(),
            out_dir: std::path::PathBuf::from("runs/prop"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_reparses_to_itself(cfg in arb_config()) {
        let text = cfg.serialize().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn annealing_is_nonincreasing_and_hits_zero(
        rounds in 1usize..50,
        gap in 0usize..10,
        decay in arb_decay(),
        eta_s in 0.01f64..10.0,
    ) {
        let zero = (rounds + 1).saturating_sub(gap).max(1);
        let schedule = RingSchedule {
            rounds,
            eta_s,
            eta_s_zero_round: zero,
            eta_s_decay: decay,
            ..RingSchedule::default()
        };
        schedule.validate().unwrap();
        let profile: Vec<f64> =
            (1..=rounds).map(|r| schedule.anneal_eta_s(r)).collect();
        if zero > 1 {
            prop_assert_eq!(profile[0], eta_s, "round 1 must run at full rate");
        }
        for w in profile.windows(2) {
            prop_assert!(w[1] <= w[0], "profile rose: {profile:?}");
        }
        for (i, v) in profile.iter().enumerate() {
            let round = i + 1;
            prop_assert!(*v >= 0.0);
            prop_assert_eq!(round >= zero, *v == 0.0,
                "round {} of zero-round {}: {}", round, zero, v);
        }
    }

    #[test]
    fn dcg_stays_in_unit_range_and_rewards_promotion(
        grades in proptest::collection::vec(0u8..3, 1..40),
        swap_at in any::<proptest::sample::Index>(),
    ) {
        let to_judgment = |g: u8| match g {
            0 => Judgment::Bad,
            1 => Judgment::Good,
            _ => Judgment::Excellent,
        };
        let ids: Vec<usize> = (0..grades.len()).collect();
        let scores: Vec<f64> = ids.iter().map(|i| (grades.len() - i) as f64).collect();
        let judgments: BTreeMap<usize, Judgment> =
            ids.iter().map(|&i| (i, to_judgment(grades[i]))).collect();
        let ranked = rank_by_scores("q", &ids, &scores).unwrap();
        let score = dcg25(&ranked, &judgments);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&score), "{score}");

        // Promoting a strictly better item one rank up never hurts.
        if grades.len() >= 2 {
            let i = swap_at.index(grades.len() - 1);
            let mut swapped = ids.clone();
            swapped.swap(i, i + 1);
            let reranked = rank_by_scores("q", &swapped, &scores).unwrap();
            let reranked_score = dcg25(&reranked, &judgments);
            let gain = |id: usize| judgments[&id].rel();
            if gain(swapped[i]) > gain(swapped[i + 1]) {
                prop_assert!(reranked_score >= score - 1e-12);
            }
        }
    }

    #[test]
    fn click_counts_respect_floor_and_cap(
        seed in any::<u64>(),
        queries in 1usize..200,
        exponent in 1.1f64..4.0,
        cap in prop_oneof![Just(0usize), 2usize..40],
    ) {
        let spec = ClickthroughSynthSpec {
            query_count: queries,
            exponent,
            max_clicks: cap,
            seed,
            ..ClickthroughSynthSpec::default()
        };
        let counts = sample_click_counts(&spec).unwrap();
        prop_assert_eq!(counts.len(), queries);
        for &c in &counts {
            prop_assert!(c >= 2, "below the click floor: {c}");
            if cap != 0 {
                prop_assert!(c <= cap, "{c} over cap {cap}");
            }
        }
    }
}

proptest! {
    // Pool construction dominates each case; keep the count modest.
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tailed_construction_keeps_splits_disjoint(seed in any::<u64>()) {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let pool = synth_pool_uniform(&spec, 60, 15).unwrap();
        let d1 = build_dataset1(&pool, 100, seed).unwrap();
        let d2 = build_dataset2(&d1, &pool, seed).unwrap();
        for ds in [&d1, &d2] {
            let mut all_train_pos = std::collections::BTreeSet::new();
            for t in &ds.tasks {
                let pos: std::collections::BTreeSet<_> = t.train_pos.iter().collect();
                let neg: std::collections::BTreeSet<_> = t.train_neg.iter().collect();
                let test: std::collections::BTreeSet<_> =
                    t.test_pos.iter().chain(&t.test_neg).collect();
                prop_assert!(pos.is_disjoint(&neg), "{}: positives overlap negatives", t.task);
                prop_assert!(pos.is_disjoint(&test), "{}: train leaks into test", t.task);
                prop_assert!(neg.is_disjoint(&test), "{}: negatives leak into test", t.task);
                prop_assert_eq!(pos.len(), t.train_pos.len());
                // Distinct tasks own distinct positive pools.
                for id in pos {
                    prop_assert!(all_train_pos.insert(*id), "positive {id} claimed twice");
                }
            }
        }
        // The twin split preserves the total and the per-category test pool.
        prop_assert_eq!(d2.n_total, d1.n_total);
        prop_assert_eq!(d2.tasks.len(), d1.tasks.len() + 1);
    }
}
