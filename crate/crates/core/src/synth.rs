//! Synthetic desk-scale corpora: each "language" is band-limited noise with
//! its own spectral envelope and amplitude-modulation rate, split across a
//! pool of synthetic speakers. Enough signal for the full pipeline to learn
//! from, zero external data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::audio::{write_wav, AudioClip};
use crate::dataset::{DatasetError, Manifest, ManifestEntry};
use crate::util::derive_seed;
use crate::CANONICAL_SAMPLE_RATE;

#[derive(Debug, Clone)]
pub struct ToyClass {
    pub name: String,
    /// Passband edges in Hz.
    pub band_hz: (f64, f64),
    /// Amplitude-modulation rate in Hz.
    pub am_hz: f64,
}

#[derive(Debug, Clone)]
pub struct ToyCorpusSpec {
    pub classes: Vec<ToyClass>,
    pub clips_per_class: usize,
    pub clip_s: f64,
    pub speakers_per_class: usize,
    pub seed: u64,
}

impl ToyCorpusSpec {
    /// Three well-separated synthetic languages.
    pub fn new(clips_per_class: usize, clip_s: f64, speakers_per_class: usize, seed: u64) -> Self {
        let classes = vec![
            ToyClass {
                name: "lang0".into(),
                band_hz: (300.0, 1200.0),
                am_hz: 2.0,
            },
            ToyClass {
                name: "lang1".into(),
                band_hz: (1500.0, 3000.0),
                am_hz: 5.0,
            },
            ToyClass {
                name: "lang2".into(),
                band_hz: (3500.0, 6000.0),
                am_hz: 8.5,
            },
        ];
        Self {
            classes,
            clips_per_class,
            clip_s,
            speakers_per_class,
            seed,
        }
    }
}

/// White noise band-passed by zeroing FFT bins outside `[lo, hi]`.
fn band_limited_noise(n: usize, rate: u32, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
        .collect();
    fwd.process(&mut buf);
    let bin_hz = rate as f64 / n as f64;
    for (i, c) in buf.iter_mut().enumerate() {
        let freq = if i <= n / 2 {
            i as f64 * bin_hz
        } else {
            (n - i) as f64 * bin_hz
        };
        if freq < lo || freq > hi {
            *c = Complex64::default();
        }
    }
    inv.process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

/// Generate the corpus under `dir` and return its manifest (also useful for
/// saving to CSV). Deterministic in `spec.seed`.
pub fn generate_toy_corpus(
    dir: impl AsRef<Path>,
    spec: &ToyCorpusSpec,
) -> Result<Manifest, DatasetError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| DatasetError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let rate = CANONICAL_SAMPLE_RATE;
    let n = (spec.clip_s * rate as f64).round() as usize;
    let mut entries = Vec::with_capacity(spec.classes.len() * spec.clips_per_class);
    for (ci, class) in spec.classes.iter().enumerate() {
        for clip_idx in 0..spec.clips_per_class {
            let speaker = clip_idx % spec.speakers_per_class.max(1);
            let speaker_id = format!("spk_{ci}_{speaker}");
            // per-speaker timbre: stable gain and band tilt
            let mut spk_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &speaker_id));
            let gain: f64 = spk_rng.random_range(0.7..1.0);
            let band_scale: f64 = spk_rng.random_range(0.95..1.05);

            let clip_key = format!("{}/{clip_idx}", class.name);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &clip_key));
            let (lo, hi) = (class.band_hz.0 * band_scale, class.band_hz.1 * band_scale);
            let mut samples = band_limited_noise(n, rate, lo, hi, &mut rng);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / rate as f64;
                *s *= 1.0 + 0.5 * (std::f64::consts::TAU * class.am_hz * t + phase).sin();
            }
            let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
            let target = 0.15 * gain;
            if rms > 0.0 {
                for s in samples.iter_mut() {
                    *s = (*s * target / rms).clamp(-0.99, 0.99);
                }
            }
            let path = dir.join(format!("{}_{clip_idx:04}.wav", class.name));
            let clip = AudioClip {
                samples,
                sample_rate: rate,
                source_id: path.display().to_string(),
            };
            write_wav(&clip, &path)?;
            entries.push(ManifestEntry {
                path,
                language: class.name.clone(),
                speaker_id: Some(speaker_id),
                duration_s: clip.duration_s(),
            });
        }
    }
    Manifest::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::read_wav;

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec::new(4, 0.5, 2, 42);
        let m = generate_toy_corpus(dir.path().join("a"), &spec).unwrap();
        assert_eq!(m.len(), 12);
        for (_, count) in m.counts_by_language() {
            assert_eq!(count, 4);
        }
        let m2 = generate_toy_corpus(dir.path().join("b"), &spec).unwrap();
        let c1 = read_wav(&m.entries()[0].path).unwrap();
        let c2 = read_wav(&m2.entries()[0].path).unwrap();
        assert_eq!(c1.samples, c2.samples);
    }

    #[test]
    fn classes_occupy_their_bands() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec::new(1, 1.0, 1, 7);
        let m = generate_toy_corpus(dir.path(), &spec).unwrap();
        for (entry, class) in m.entries().iter().zip(&spec.classes) {
            let clip = read_wav(&entry.path).unwrap();
            let (freq, _) = crate::augment::tests::dominant_freq(&clip.samples, 16000);
            assert!(
                freq >= class.band_hz.0 * 0.9 && freq <= class.band_hz.1 * 1.1,
                "{} peak {freq} outside {:?}",
                class.name,
                class.band_hz
            );
        }
    }
}
