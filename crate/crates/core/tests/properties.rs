//! Property tests for the signal-chain invariants.

use proptest::prelude::*;

use xlid_core::audio::{read_wav, resample, trim_dead_segments, write_wav, AudioClip};
use xlid_core::augment::speed_perturb;
use xlid_core::features::{mean_normalize, FeatureKind, FeatureMatrix};

fn arb_samples(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wav_round_trip_within_one_lsb(samples in arb_samples(4000), rate in prop::sample::select(vec![8000u32, 16000, 44100])) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let clip = AudioClip::new(samples.clone(), rate, "p").unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.samples.len(), samples.len());
        prop_assert_eq!(back.sample_rate, rate);
        for (a, b) in back.samples.iter().zip(&samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn trim_is_idempotent(samples in arb_samples(8000)) {
        let clip = AudioClip::new(samples, 16000, "p").unwrap();
        let Ok(once) = trim_dead_segments(&clip, 25.0, -45.0) else {
            // everything below the floor: trimming again must agree
            return Ok(());
        };
        let twice = trim_dead_segments(&once, 25.0, -45.0).unwrap();
        prop_assert_eq!(once.samples, twice.samples);
    }

    #[test]
    fn resample_preserves_duration(samples in arb_samples(5000), target in 4000u32..48000) {
        let clip = AudioClip::new(samples, 16000, "p").unwrap();
        let out = resample(&clip, target).unwrap();
        let drift = (out.samples.len() as f64 / target as f64 - clip.duration_s()).abs();
        prop_assert!(drift < 1.0 / target as f64, "drift {}", drift);
    }

    #[test]
    fn speed_length_law_exact(samples in arb_samples(5000), factor in 0.51f64..1.99) {
        let clip = AudioClip::new(samples, 16000, "p").unwrap();
        let out = speed_perturb(&clip, factor).unwrap();
        let want = (clip.samples.len() as f64 / factor).round().max(1.0) as usize;
        prop_assert_eq!(out.samples.len(), want);
    }

    #[test]
    fn mean_normalize_is_idempotent(rows in 1usize..30, cols in 1usize..16, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let feat = FeatureMatrix {
            values: ndarray::Array2::from_shape_fn((rows, cols), |_| rng.random_range(-10.0..10.0)),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let once = mean_normalize(&feat);
        for col in once.values.columns() {
            prop_assert!((col.sum() / rows as f64).abs() <= 1e-9);
        }
        let twice = mean_normalize(&once);
        for (a, b) in twice.values.iter().zip(once.values.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
