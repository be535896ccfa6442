use humanline_core::humanline::{compute_ratio_bounds, humanline_clip};
use humanline_core::objectives::{dpo_from_rewards, group_advantages, sequence_reward};
use humanline_core::{
    DetachMask, HumanlineConfig, Policy64, PolicySpec, Purpose, Sequence, Streams, SyncPeriod, TokenId, Vocabulary,
};
use proptest::prelude::*;

fn spec() -> PolicySpec {
    PolicySpec::new(Vocabulary::new(6, 4, 5).unwrap(), 2, 3, 6).unwrap()
}

fn random_policy(seed: u64, scale: f64) -> Policy64 {
    Policy64::random(spec(), scale, &mut Streams::new(seed).stream(Purpose::Init, 0)).unwrap()
}

fn sequence() -> impl Strategy<Value = Sequence> {
    (
        proptest::collection::vec(0u32..4, 3),
        proptest::collection::vec(prop_oneof![0u32..4, Just(5u32)], 1..6),
    )
        .prop_map(|(ctx, out): (Vec<TokenId>, Vec<TokenId>)| Sequence::new(ctx, out))
}

proptest! {
    #[test]
    fn conditionals_are_normalised(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let p = random_policy(seed, scale);
        for s in 0..p.num_states() {
            let lp = p.log_softmax(s);
            prop_assert!(lp.iter().all(|x| x.is_finite()));
            let total: f64 = lp.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "state {s}: {total}");
        }
    }

    #[test]
    fn masked_tokens_contribute_nothing(
        seed in any::<u64>(),
        seq in sequence(),
        weights in proptest::collection::vec(-3.0f64..3.0, 6),
        mask in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let p = random_policy(seed, 1.0);
        let n = seq.len();
        let mask = DetachMask(mask[..n].to_vec());
        let masked = p.logprob_grad(&seq, &weights[..n], &mask).unwrap();
        let zeroed: Vec<f64> = (0..n).map(|t| if mask.0[t] { 0.0 } else { weights[t] }).collect();
        let sub_sum = p.logprob_grad(&seq, &zeroed, &DetachMask::none(n)).unwrap();
        prop_assert_eq!(masked.as_slice(), sub_sum.as_slice());
    }

    #[test]
    fn ratio_bounds_are_at_least_one_and_dominate(seed in any::<u64>(), scale in 0.0f64..5.0) {
        let p = random_policy(seed, scale);
        let r = random_policy(seed.wrapping_add(1), scale);
        for s in 0..p.num_states() {
            let b = compute_ratio_bounds(&p, &r, s);
            prop_assert!(b.m_p >= 1.0 && b.m_r >= 1.0);
            for (a, c) in p.softmax(s).iter().zip(r.softmax(s)) {
                prop_assert!(a / c <= b.m_p && c / a <= b.m_r);
            }
        }
    }

    #[test]
    fn clipping_is_idempotent(xs in proptest::collection::vec(-10.0f64..10.0, 0..20), lo in -3.0f64..-0.01, hi in 0.01f64..3.0) {
        let cfg = HumanlineConfig::clipping(lo, hi, SyncPeriod::Every(1));
        let once = humanline_clip(&xs, &cfg);
        prop_assert_eq!(humanline_clip(&once, &cfg), once.clone());
        prop_assert!(once.iter().all(|&v| (lo..=hi).contains(&v)));
    }

    #[test]
    fn clipped_sequence_rewards_are_bounded(
        lp in proptest::collection::vec(-20.0f64..0.0, 1..12),
        shift in proptest::collection::vec(-20.0f64..20.0, 12),
        lo in -3.0f64..-0.01, hi in 0.01f64..3.0,
    ) {
        let refs: Vec<f64> = lp.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let cfg = HumanlineConfig::clipping(lo, hi, SyncPeriod::Every(1));
        let r = sequence_reward(&lp, &refs[..lp.len()], &cfg, None, false).unwrap();
        prop_assert!(r.value.abs() <= lp.len() as f64 * lo.abs().max(hi.abs()) + 1e-12);
    }

    #[test]
    fn dpo_swap_negates_the_margin(a in -30.0f64..30.0, b in -30.0f64..30.0, beta in 0.01f64..5.0) {
        // -log s(u) + log s(-u) = -u for every u.
        let (fwd, _, _) = dpo_from_rewards(a, b, beta);
        let (rev, _, _) = dpo_from_rewards(b, a, beta);
        let u = beta * (a - b);
        prop_assert!((fwd - rev + u).abs() <= 1e-12 * (1.0 + u.abs()));
    }

    #[test]
    fn advantages_are_standardised(rewards in proptest::collection::vec(-5.0f64..5.0, 2..16)) {
        let adv = group_advantages(&rewards).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        if var.sqrt() > 1e-6 {
            let m = adv.iter().sum::<f64>() / n;
            let v = adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((v - 1.0).abs() <= 1e-6, "variance {v}");
        }
    }

    #[test]
    fn two_distinct_rewards_give_unit_signs(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        prop_assume!(a != b);
        let adv = group_advantages(&[a, b]).unwrap();
        let want = if a > b { vec![1.0, -1.0] } else { vec![-1.0, 1.0] };
        prop_assert_eq!(adv, want);
    }
}
