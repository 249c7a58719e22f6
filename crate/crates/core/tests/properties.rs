use duel_core::denoiser::fit_tabular;
use duel_core::metrics::{gap_closed, perplexity};
use duel_core::numeric::log_sum_exp;
use duel_core::oracle::{oracle_block_search, EnumCaps};
use duel_core::persist::AnyDenoiser;
use duel_core::seq::validate_partition;
use duel_core::{
    duel_exact_loglik, duel_sample, CleanSequence, Denoiser, MaskedSequence, RuleSpec, TrainableDenoiser,
};
use proptest::prelude::*;

fn rule_strategy(len: usize) -> impl Strategy<Value = RuleSpec> {
    let flat = prop_oneof![
        (1..=len + 1).prop_map(|k| RuleSpec::LeftToRight { k }),
        (1..=len + 1).prop_map(|k| RuleSpec::GreedyConfidence { k }),
        (1..=len + 1).prop_map(|k| RuleSpec::ProbMargin { k }),
        (0.01f64..=1.0).prop_map(|mu| RuleSpec::ConfThreshold { mu }),
        (0.01f64..=1.0, 0.0f64..2.0).prop_map(|(mu, nu)| RuleSpec::Klass { mu, nu }),
        Just(()).prop_perturb(move |_, mut rng| {
            let mut order: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            RuleSpec::FixedOrder(order)
        }),
    ];
    let divisors: Vec<usize> = (1..=len).filter(|d| len.is_multiple_of(*d)).collect();
    (flat, proptest::sample::select(divisors), any::<bool>()).prop_map(|(inner, size, wrap)| {
        if wrap && !matches!(inner, RuleSpec::FixedOrder(_)) {
            RuleSpec::BlockRestrict {
                size,
                inner: Box::new(inner),
            }
        } else {
            inner
        }
    })
}

fn setup() -> impl Strategy<Value = (usize, usize, u64, Vec<u32>)> {
    (1usize..=5, 2usize..=4, any::<u64>()).prop_flat_map(|(len, vocab, seed)| {
        (
            Just(len),
            Just(vocab),
            Just(seed),
            proptest::collection::vec(0..vocab as u32, len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_are_valid_partitions(
        ((len, vocab, seed, toks), rule) in setup().prop_flat_map(|s| {
            let len = s.0;
            (Just(s), rule_strategy(len))
        }),
    ) {
        let d = TrainableDenoiser::new(len, vocab, 4, 0.1, seed).unwrap();
        let x = CleanSequence::new(toks, vocab).unwrap();
        let rec = duel_exact_loglik(&d, &rule, &x).unwrap();
        prop_assert!(validate_partition(rec.partition.parts(), len).is_ok());
        prop_assert!(rec.nfe >= 1 && rec.nfe <= len);
        prop_assert!(rec.total_loglik <= 0.0);
        let per_step: f64 = rec.per_step_logprobs.iter().flatten().map(|(_, lp)| lp).sum();
        prop_assert!((per_step - rec.total_loglik).abs() < 1e-12);
        if let Some(nfe) = rule.fixed_nfe(len) {
            prop_assert_eq!(rec.nfe, nfe);
        }
        let (sample, srec) = duel_sample(&d, &rule, seed).unwrap();
        prop_assert_eq!(sample.len(), len);
        prop_assert!(validate_partition(srec.partition.parts(), len).is_ok());
    }

    #[test]
    fn denoiser_rows_are_distributions(
        (len, vocab, seed, toks) in setup(),
        mask in proptest::collection::vec(any::<bool>(), 5),
        lambda in 0.0f64..2.0,
    ) {
        let ids: Vec<u32> = toks
            .iter()
            .zip(&mask)
            .map(|(t, m)| if *m { vocab as u32 } else { *t })
            .collect();
        let z = MaskedSequence::from_ids(&ids, vocab).unwrap();
        let trained = TrainableDenoiser::new(len, vocab, 3, 0.1, seed).unwrap();
        prop_assert!(trained.evaluate(&z).check().is_ok());
        let x = CleanSequence::new(toks.clone(), vocab).unwrap();
        let tab = fit_tabular(&[x], vocab, lambda).unwrap();
        prop_assert!(tab.evaluate(&z).check().is_ok());
    }

    #[test]
    fn reveal_changes_one_position(
        (len, vocab, _seed, toks) in setup(),
        pos in 0usize..5,
    ) {
        let pos = pos % len;
        let z = MaskedSequence::all_masked(len, vocab);
        let next = z.reveal(pos, toks[pos]).unwrap();
        prop_assert_eq!(next.num_masked(), len - 1);
        prop_assert_eq!(next.get(pos), Some(toks[pos]));
        prop_assert!(next.reveal(pos, toks[pos]).is_err());
    }

    #[test]
    fn rule_strings_round_trip(rule in (1usize..=6).prop_flat_map(rule_strategy)) {
        let back: RuleSpec = rule.to_string().parse().unwrap();
        prop_assert_eq!(back, rule);
    }

    #[test]
    fn trainable_models_round_trip(len in 1usize..5, vocab in 2usize..4, hidden in 1usize..5, seed in any::<u64>()) {
        let d: AnyDenoiser = TrainableDenoiser::new(len, vocab, hidden, 0.01, seed).unwrap().into();
        prop_assert_eq!(AnyDenoiser::from_json(&d.to_json().unwrap()).unwrap(), d);
    }

    #[test]
    fn log_sum_exp_matches_naive(xs in proptest::collection::vec(-30.0f64..30.0, 1..20)) {
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn perplexity_is_monotone(a in 0.0f64..50.0, b in 0.0f64..50.0, n in 1usize..100) {
        prop_assume!(a < b);
        prop_assert!(perplexity(a, n) <= perplexity(b, n));
    }

    #[test]
    fn gap_closed_is_full_when_duel_matches_arm(arm in 1.0f64..100.0, extra in 0.01f64..50.0) {
        let g = gap_closed(arm + extra, arm, arm).unwrap();
        prop_assert!((g - 100.0).abs() < 1e-9);
    }
}

#[test]
fn coarser_nested_blocks_never_increase_oracle_nll() {
    let caps = EnumCaps::default();
    for seed in 0..10 {
        let d = TrainableDenoiser::new(4, 3, 5, 0.1, seed).unwrap();
        for x in CleanSequence::enumerate_all(4, 3).into_iter().step_by(7) {
            let nll: Vec<f64> = [1, 2, 4]
                .iter()
                .map(|&b| oracle_block_search(&d, &x, b, &caps).unwrap().nll)
                .collect();
            assert!(nll[1] <= nll[0] + 1e-12, "{nll:?}");
            assert!(nll[2] <= nll[1] + 1e-12, "{nll:?}");
        }
    }
}
