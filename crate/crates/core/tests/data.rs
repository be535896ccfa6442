use humanline_core::data::{
    make_offline_corpus, noised_sampler, online_round, scored_reward, verifiable_reward, Corpus, ScoreWeights,
};
use humanline_core::{Policy64, Purpose, RewardKind, RewardSource, SamplingConfig, SortTask, Streams, TokenId};
use proptest::prelude::*;
use rand::Rng as _;

fn task() -> SortTask {
    SortTask::new(3, 3).unwrap()
}

fn sampler(seed: u64) -> Policy64 {
    let spec = task().policy_spec(4).unwrap();
    let init = Policy64::random(spec, 1.0, &mut Streams::new(seed).stream(Purpose::Init, 0)).unwrap();
    noised_sampler(&init, 1.0, &mut Streams::new(seed).stream(Purpose::Noise, 0)).unwrap()
}

/// Index of the first maximum (or minimum) score.
fn first_extreme(scores: &[f64], want_max: bool) -> usize {
    let best = if want_max {
        scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        scores.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    scores.iter().position(|&s| s == best).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn emitted_pairs_clear_tau_and_are_extreme(seed in 0u64..1000, tau in 0.0f64..0.3, verifiable in any::<bool>()) {
        let kind = if verifiable { RewardKind::Verifiable } else { RewardKind::Scored };
        let reward = RewardSource::new(task(), kind);
        let cfg = SamplingConfig { tau, ..SamplingConfig::default() };
        let round = online_round(&sampler(seed), &reward, &cfg, &Streams::new(seed), 1, 16, 64).unwrap();
        prop_assert_eq!(round.records.len(), round.groups.len());
        prop_assert_eq!(round.records.len() + round.filtered, round.contexts_sampled);
        for (r, g) in round.records.iter().zip(&round.groups) {
            let (w, l) = (r.r_w.unwrap(), r.r_l.unwrap());
            prop_assert!(w - l >= tau);
            prop_assert_eq!(w, reward.score(&r.x, &r.y_w));
            prop_assert_eq!(l, reward.score(&r.x, &r.y_l));
            prop_assert_eq!(&r.y_w, &g.outputs[first_extreme(&g.rewards, true)]);
            prop_assert_eq!(&r.y_l, &g.outputs[first_extreme(&g.rewards, false)]);
        }
    }

    #[test]
    fn scored_reward_is_bounded_and_deterministic(
        x in proptest::collection::vec(0u32..3, 3),
        body in proptest::collection::vec(0u32..5, 0..6),
        s in 0.0f64..1.0, l in 0.0f64..1.0, c in 0.01f64..1.0,
    ) {
        let mut y = body.clone();
        y.push(task().eos());
        let w = ScoreWeights { sortedness: s, length: l, content: c };
        let r = scored_reward(&task(), &x, &y, &w);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, scored_reward(&task(), &x, &y, &w));
    }
}

#[test]
fn sorted_context_is_the_only_perfect_score() {
    let t = task();
    let w = ScoreWeights::default();
    let x = vec![2, 0, 1];
    assert_eq!(scored_reward(&t, &x, &t.target(&x), &w), 1.0);
    assert!(scored_reward(&t, &x, &[0, 2, 1, t.eos()], &w) < 1.0);
    assert!(scored_reward(&t, &x, &[0, 1, 1, t.eos()], &w) < 1.0);
    assert!(scored_reward(&t, &x, &[0, 1, t.eos()], &w) < 1.0);
}

#[test]
fn verifiable_reward_matches_oracle_on_200_outputs() {
    let t = task();
    let mut rng = Streams::new(5).stream(Purpose::Sampling, 0);
    for i in 0..200 {
        let x = t.sample_context(&mut rng);
        let mut sorted = x.clone();
        sorted.sort_unstable();
        let eos = t.eos();
        let y: Vec<TokenId> = match i % 5 {
            0 => sorted.iter().copied().chain([eos]).collect(),
            1 => x.iter().copied().chain([eos]).collect(),
            2 => {
                let mut y: Vec<TokenId> = sorted.iter().copied().chain([eos]).collect();
                y[rng.random_range(0..3)] = rng.random_range(0..5);
                y
            }
            3 => sorted[..2].iter().copied().chain([eos]).collect(),
            _ => (0..rng.random_range(1..6)).map(|_| rng.random_range(0..5)).collect(),
        };
        let format = y.len() == 4 && y[3] == eos && y[..3].iter().all(|&d| d < 3);
        let accuracy = y[..] == [sorted[0], sorted[1], sorted[2], eos];
        let want = (f64::from(u8::from(format)) + 8.0 * f64::from(u8::from(accuracy))) / 9.0;
        let got = verifiable_reward(&t, &x, &y);
        assert_eq!((got.format, got.accuracy, got.total), (format, accuracy, want), "x={x:?} y={y:?}");
    }
}

#[test]
fn corpus_files_are_byte_identical_across_reruns() {
    let reward = RewardSource::new(task(), RewardKind::Scored);
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_offline_corpus(&sampler(3), "worse", &reward, &SamplingConfig::default(), 3, 48, 4.0).unwrap();
        let path = corpus.write(dir.path()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let manifest = std::fs::read(path.with_extension("manifest.json")).unwrap();
        let back = Corpus::read(&path).unwrap();
        assert_eq!(back.records, corpus.records);
        (bytes, manifest)
    };
    let (a, b) = (write(), write());
    assert_eq!(a, b);
    assert!(!a.0.is_empty());
}

#[test]
fn corpus_depends_on_the_seed() {
    let reward = RewardSource::new(task(), RewardKind::Scored);
    let cfg = SamplingConfig::default();
    let a = make_offline_corpus(&sampler(3), "worse", &reward, &cfg, 3, 16, 4.0).unwrap();
    let b = make_offline_corpus(&sampler(3), "worse", &reward, &cfg, 4, 16, 4.0).unwrap();
    assert_ne!(a.records, b.records);
}
