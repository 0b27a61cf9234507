use mtd_core::data::{generate_corpus, sample_batch, Corpus, CorpusConfig, LatentOracle, SamplingOptions};
use mtd_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_train: 8,
        n_val: 4,
        n_test: 4,
        frames_per_utterance: 40,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_corpus(&small(5)).unwrap();
    let b = generate_corpus(&small(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = generate_corpus(&small(6)).unwrap();
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn splits_do_not_depend_on_each_others_sizes() {
    let a = generate_corpus(&small(5)).unwrap();
    let b = generate_corpus(&CorpusConfig { n_train: 3, ..small(5) }).unwrap();
    assert_eq!(a.val, b.val);
    assert_eq!(a.test, b.test);
}

#[test]
fn features_stay_bounded() {
    let c = generate_corpus(&CorpusConfig::default()).unwrap();
    let max = c
        .train
        .iter()
        .flat_map(|u| u.visual.values().iter().chain(u.audio.values()))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max <= 3.5, "max |feature| = {max}");
}

#[test]
fn noiseless_frames_share_a_latent() {
    let cfg = CorpusConfig {
        noise_sigma: 0.0,
        ..small(9)
    };
    let c = generate_corpus(&cfg).unwrap();
    let oracle = LatentOracle::new(&c).unwrap();
    for u in &c.train {
        for t in [0, 7, u.frames() - 1] {
            let zv = oracle.recover(u.visual.row(t), true);
            let za = oracle.recover(u.audio.row(4 * t), false);
            for (a, b) in zv.iter().zip(&za) {
                // f32 storage limits agreement.
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn latent_oracle_identifies_sync_on_default_corpus() {
    let c = generate_corpus(&CorpusConfig::default()).unwrap();
    let oracle = LatentOracle::new(&c).unwrap();
    let rate = oracle.identification_rate(&c.val, 500, 17).unwrap();
    assert!(rate > 0.95, "oracle identification {rate}");
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    let c = generate_corpus(&small(2)).unwrap();
    c.save(&path).unwrap();
    let back = Corpus::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
}

#[test]
fn corrupted_and_truncated_files_are_format_errors() {
    let bytes = generate_corpus(&small(2)).unwrap().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Corpus::from_bytes(&bad), Err(Error::Format { .. })));
    let cut = &bytes[..bytes.len() - 10];
    match Corpus::from_bytes(cut) {
        Err(Error::Format { offset, .. }) => assert!(offset > 8),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn previous_version_is_rejected_explicitly() {
    let mut bytes = generate_corpus(&small(2)).unwrap().to_bytes();
    bytes[7] = b'0';
    assert!(matches!(Corpus::from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));
}

#[test]
fn negative_offsets_are_uniform() {
    let c = generate_corpus(&small(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 31];
    let mut n = 0;
    while n < 100_000 {
        for p in sample_batch(&c.train, 500, &mut rng, &SamplingOptions::default()).unwrap() {
            if !p.label {
                counts[(p.offset + 15) as usize] += 1;
                n += 1;
            }
        }
    }
    assert_eq!(counts[15], 0);
    for (i, &k) in counts.iter().enumerate() {
        if i == 15 {
            continue;
        }
        let f = k as f64 / n as f64;
        assert!((f - 1.0 / 30.0).abs() <= 0.005, "offset {}: {f}", i as i32 - 15);
    }
    // Chi-square with 29 degrees of freedom; 0.999 quantile is about 58.3.
    let e = n as f64 / 30.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 15)
        .map(|(_, &k)| (k as f64 - e).powi(2) / e)
        .sum();
    assert!(chi2 < 58.3, "chi2 = {chi2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_pairs_are_consistent(seed in 0u64..1000, half in 1usize..6, near in any::<bool>()) {
        let c = generate_corpus(&small(seed % 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = SamplingOptions { exclude_near_zero: near, ..SamplingOptions::default() };
        let batch = sample_batch(&c.train, 2 * half, &mut rng, &opts).unwrap();
        prop_assert_eq!(batch.iter().filter(|p| p.label).count(), half);
        for p in &batch {
            prop_assert_eq!(p.label, p.offset == 0);
            prop_assert!(p.offset.abs() <= 15);
            if near && !p.label {
                prop_assert!(p.offset.abs() >= 2);
            }
            let audio_start = p.start as i64 + p.offset as i64;
            prop_assert!(audio_start >= 0);
            prop_assert!(p.start + 5 <= 40 && audio_start as usize + 5 <= 40);
        }
    }
}
