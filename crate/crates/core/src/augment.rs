//! Offline data augmentation: rate-based speed perturbation, pitch shifting
//! with duration restoration, and additive noise at a controlled SNR.
//!
//! Everything is deterministic given the spec seed, so an augmented corpus can
//! be regenerated byte for byte.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, write_wav, AudioClip, AudioError};
use crate::dataset::{Manifest, ManifestEntry};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("speed factor {0} outside (0.5, 2.0)")]
    FactorOutOfRange(f64),
    #[error("pitch shift {0} semitones outside [-6, 6]")]
    ShiftOutOfRange(f64),
    #[error("clip has zero signal power")]
    SilentSignal,
    #[error("invalid augment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("augmenting {source_id}: {source}")]
    Clip {
        source_id: String,
        #[source]
        source: Box<AugmentError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Gaussian,
}

impl NoiseKind {
    pub fn tag(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(format!("unknown noise kind '{other}'")),
        }
    }
}

/// What to generate per input clip: the original plus one output per speed
/// factor (1.0 skipped), pitch shift, and noise kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub speed_factors: Vec<f64>,
    pub pitch_semitones: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub snr_db_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.0, 1.1],
            pitch_semitones: vec![-2.0, -1.0, 1.0, 2.0],
            noise_kinds: vec![NoiseKind::Gaussian],
            snr_db_range: (5.0, 20.0),
            rng_seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for &f in &self.speed_factors {
            if !(f > 0.5 && f < 2.0) {
                return Err(AugmentError::FactorOutOfRange(f));
            }
        }
        for &s in &self.pitch_semitones {
            if s.abs() > 6.0 {
                return Err(AugmentError::ShiftOutOfRange(s));
            }
        }
        if self.snr_db_range.0 > self.snr_db_range.1 {
            return Err(AugmentError::InvalidSpec("empty SNR interval".into()));
        }
        Ok(())
    }

    /// Outputs emitted per input clip, including the passthrough original.
    pub fn outputs_per_clip(&self) -> usize {
        1 + self.speed_factors.iter().filter(|&&f| f != 1.0).count()
            + self.pitch_semitones.len()
            + self.noise_kinds.len()
    }
}

/// Resample the time axis by `factor`, scaling tempo and pitch together.
/// Output length is exactly `round(len / factor)`.
pub fn speed_perturb(clip: &AudioClip, factor: f64) -> Result<AudioClip, AugmentError> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(AugmentError::FactorOutOfRange(factor));
    }
    if factor == 1.0 {
        return Ok(clip.clone());
    }
    let out_len = ((clip.samples.len() as f64 / factor).round() as usize).max(1);
    let samples = (0..out_len)
        .map(|i| crate::audio::sample_at(&clip.samples, i as f64 * factor))
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Scale pitch by `2^(semitones/12)` while keeping the duration: resample the
/// time axis, then stretch back with an overlap-add scheme (10 ms hop, 40 ms
/// window) that aligns each grain against the continuation of the previous
/// one.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip, AugmentError> {
    if semitones.abs() > 6.0 {
        return Err(AugmentError::ShiftOutOfRange(semitones));
    }
    if semitones == 0.0 {
        return Ok(clip.clone());
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let fast_len = ((clip.samples.len() as f64 / ratio).round() as usize).max(1);
    let fast: Vec<f64> = (0..fast_len)
        .map(|i| crate::audio::sample_at(&clip.samples, i as f64 * ratio))
        .collect();
    let stretched = time_stretch_ola(&fast, clip.samples.len(), clip.sample_rate);
    let samples = stretched.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Waveform-similarity overlap-add time stretch to an exact target length.
fn time_stretch_ola(x: &[f64], target_len: usize, rate: u32) -> Vec<f64> {
    let win = ((0.040 * rate as f64).round() as usize).max(4);
    let hop = ((0.010 * rate as f64).round() as usize).max(1);
    let search = (0.005 * rate as f64).round() as isize;
    if x.len() <= win + 2 * search as usize || target_len <= win {
        // degenerate inputs: plain linear stretch
        let step = x.len() as f64 / target_len as f64;
        return (0..target_len)
            .map(|i| crate::audio::sample_at(x, i as f64 * step))
            .collect();
    }
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect();
    let stretch = target_len as f64 / x.len() as f64;
    let overlap = win - hop;
    let max_start = (x.len() - win) as isize;
    let mut num = vec![0.0f64; target_len + win];
    let mut den = vec![0.0f64; target_len + win];
    let mut prev_src: isize = 0;
    let mut k = 0usize;
    loop {
        let out_pos = k * hop;
        if out_pos >= target_len {
            break;
        }
        let naive = ((out_pos as f64 / stretch).round() as isize).clamp(0, max_start);
        let src = if k == 0 {
            naive
        } else {
            // align against the natural continuation of the previous grain
            let natural = (prev_src + hop as isize).clamp(0, max_start);
            let reference = &x[natural as usize..natural as usize + overlap];
            let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
            let mut best = naive;
            let mut best_score = f64::NEG_INFINITY;
            let mut delta = -search;
            while delta <= search {
                let cand = naive + delta;
                delta += 1;
                if cand < 0 || cand > max_start {
                    continue;
                }
                let grain = &x[cand as usize..cand as usize + overlap];
                let dot: f64 = grain.iter().zip(reference).map(|(a, b)| a * b).sum();
                let energy: f64 = grain.iter().map(|v| v * v).sum();
                let score = if energy * ref_energy > 0.0 {
                    dot / (energy * ref_energy).sqrt()
                } else {
                    0.0
                };
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        for n in 0..win {
            num[out_pos + n] += window[n] * x[src as usize + n];
            den[out_pos + n] += window[n];
        }
        prev_src = src;
        k += 1;
    }
    (0..target_len)
        .map(|i| if den[i] > 1e-8 { num[i] / den[i] } else { 0.0 })
        .collect()
}

/// Deterministic noise buffer for a kind, length, and seed. White and gaussian
/// are i.i.d. standard normal; pink stacks octave-rate sample-and-hold rows
/// (Voss-McCartney) for a 1/f power slope.
pub fn noise_signal(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NoiseKind::White | NoiseKind::Gaussian => (0..len)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
        NoiseKind::Pink => {
            const ROWS: usize = 16;
            let mut rows = [0.0f64; ROWS];
            for r in rows.iter_mut() {
                *r = StandardNormal.sample(&mut rng);
            }
            let mut out = Vec::with_capacity(len);
            for i in 0..len {
                for (k, r) in rows.iter_mut().enumerate() {
                    if i % (1usize << k) == 0 {
                        *r = StandardNormal.sample(&mut rng);
                    }
                }
                out.push(rows.iter().sum::<f64>() / (ROWS as f64).sqrt());
            }
            out
        }
    }
}

/// Mix seeded noise into the clip so the signal-to-noise ratio equals
/// `snr_db`, then clamp to `[-1, 1]`.
pub fn add_noise(
    clip: &AudioClip,
    kind: NoiseKind,
    snr_db: f64,
    seed: u64,
) -> Result<AudioClip, AugmentError> {
    let n = clip.samples.len();
    let p_signal = clip.samples.iter().map(|s| s * s).sum::<f64>() / n as f64;
    if p_signal == 0.0 {
        return Err(AugmentError::SilentSignal);
    }
    let noise = noise_signal(kind, n, seed);
    let p_noise = noise.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let scale = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clip
        .samples
        .iter()
        .zip(&noise)
        .map(|(s, w)| (s + scale * w).clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

fn clip_err(source_id: &str, source: AugmentError) -> AugmentError {
    AugmentError::Clip {
        source_id: source_id.to_string(),
        source: Box::new(source),
    }
}

/// Write the original plus every configured perturbation of each manifest
/// entry into `out_dir` and return the manifest of the augmented corpus,
/// sorted by (language, path). Labels and speaker ids carry over.
pub fn augment_corpus(
    manifest: &Manifest,
    spec: &AugmentSpec,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, AugmentError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut entries = manifest.entries().to_vec();
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut out_entries = Vec::with_capacity(entries.len() * spec.outputs_per_clip());
    for entry in &entries {
        let src = entry.path.display().to_string();
        let clip = read_wav(&entry.path).map_err(|e| clip_err(&src, e.into()))?;
        let stem = entry
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        let tag = format!("{stem}-{:08x}", crate::util::fnv1a64(src.as_bytes()) as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, &src));

        let mut emit = |suffix: &str, out_clip: &AudioClip| -> Result<(), AugmentError> {
            let name = format!("{tag}{suffix}.wav");
            let path = out_dir.join(name);
            write_wav(out_clip, &path).map_err(|e| clip_err(&src, e.into()))?;
            out_entries.push(ManifestEntry {
                path,
                language: entry.language.clone(),
                speaker_id: entry.speaker_id.clone(),
                duration_s: out_clip.duration_s(),
            });
            Ok(())
        };

        emit("", &clip)?;
        for &factor in &spec.speed_factors {
            if factor == 1.0 {
                continue;
            }
            let out = speed_perturb(&clip, factor).map_err(|e| clip_err(&src, e))?;
            emit(&format!("_speed{factor:.2}"), &out)?;
        }
        for &st in &spec.pitch_semitones {
            let out = pitch_shift(&clip, st).map_err(|e| clip_err(&src, e))?;
            emit(&format!("_pitch{st:+.1}"), &out)?;
        }
        for &kind in &spec.noise_kinds {
            let (lo, hi) = spec.snr_db_range;
            let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let noise_seed = rng.next_u64();
            let out = add_noise(&clip, kind, snr, noise_seed).map_err(|e| clip_err(&src, e))?;
            emit(&format!("_{}_snr{snr:.1}", kind.tag()), &out)?;
        }
    }
    Manifest::from_entries_with_languages(out_entries, manifest.languages().to_vec())
        .map_err(|e| AugmentError::InvalidSpec(format!("augmented manifest: {e}")))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioClip {
        let n = (secs * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(samples, rate, "sine").unwrap()
    }

    /// Dominant frequency via an FFT over the middle of the clip.
    pub(crate) fn dominant_freq(samples: &[f64], rate: u32) -> (f64, f64) {
        use rustfft::{num_complex::Complex64, FftPlanner};
        let n = 8192.min(samples.len().next_power_of_two() / 2).max(1024);
        let start = (samples.len().saturating_sub(n)) / 2;
        let mut buf: Vec<Complex64> = samples[start..start + n]
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm_sqr().partial_cmp(&buf[b].norm_sqr()).unwrap())
            .unwrap();
        let bin_hz = rate as f64 / n as f64;
        (bin as f64 * bin_hz, bin_hz)
    }

    #[test]
    fn speed_identity_factor() {
        let clip = sine(440.0, 16000, 0.5, 0.5);
        let out = speed_perturb(&clip, 1.0).unwrap();
        assert_eq!(out.samples, clip.samples);
    }

    #[test]
    fn speed_length_law_exact() {
        let clip = AudioClip::new(vec![0.1; 16000], 16000, "c").unwrap();
        let out = speed_perturb(&clip, 1.1).unwrap();
        assert_eq!(out.samples.len(), 14545);
    }

    #[test]
    fn speed_rejects_out_of_range() {
        let clip = sine(440.0, 16000, 0.1, 0.5);
        assert!(matches!(
            speed_perturb(&clip, 2.0),
            Err(AugmentError::FactorOutOfRange(_))
        ));
        assert!(matches!(
            speed_perturb(&clip, 0.5),
            Err(AugmentError::FactorOutOfRange(_))
        ));
    }

    #[test]
    fn speed_shifts_tone_frequency() {
        let clip = sine(440.0, 16000, 2.0, 0.5);
        let out = speed_perturb(&clip, 1.1).unwrap();
        let (freq, bin_hz) = dominant_freq(&out.samples, 16000);
        assert!((freq - 484.0).abs() <= bin_hz, "freq {freq} bin {bin_hz}");
    }

    #[test]
    fn speed_round_trip_duration() {
        let clip = sine(300.0, 16000, 1.0, 0.5);
        let fwd = speed_perturb(&clip, 1.25).unwrap();
        let back = speed_perturb(&fwd, 1.0 / 1.25).unwrap();
        assert!((back.samples.len() as i64 - clip.samples.len() as i64).abs() <= 2);
    }

    #[test]
    fn pitch_zero_is_identity() {
        let clip = sine(440.0, 16000, 1.0, 0.5);
        let out = pitch_shift(&clip, 0.0).unwrap();
        assert_eq!(out.samples, clip.samples);
    }

    #[test]
    fn pitch_rejects_large_shift() {
        let clip = sine(440.0, 16000, 0.5, 0.5);
        assert!(matches!(
            pitch_shift(&clip, 12.0),
            Err(AugmentError::ShiftOutOfRange(_))
        ));
    }

    #[test]
    fn pitch_up_two_semitones_moves_tone() {
        let clip = sine(440.0, 16000, 2.0, 0.5);
        let out = pitch_shift(&clip, 2.0).unwrap();
        let (freq, bin_hz) = dominant_freq(&out.samples, 16000);
        let want = 440.0 * 2f64.powf(2.0 / 12.0);
        assert!((freq - want).abs() <= bin_hz, "freq {freq} want {want}");
    }

    #[test]
    fn pitch_preserves_duration_within_hop() {
        let hop = 160;
        for st in [-2.0, -1.0, 1.0, 2.0] {
            let clip = sine(330.0, 16000, 1.3, 0.5);
            let out = pitch_shift(&clip, st).unwrap();
            let drift = (out.samples.len() as i64 - clip.samples.len() as i64).abs();
            assert!(drift <= hop, "drift {drift} at {st} semitones");
        }
    }

    #[test]
    fn noise_hits_target_snr() {
        let clip = sine(440.0, 16000, 1.0, 0.4);
        for snr in [0.0, 5.0, 10.0, 20.0] {
            let out = add_noise(&clip, NoiseKind::Gaussian, snr, 99).unwrap();
            // reconstruct the pre-clamp mixture's noise from the stored realization
            let noise = noise_signal(NoiseKind::Gaussian, clip.samples.len(), 99);
            let p_signal =
                clip.samples.iter().map(|s| s * s).sum::<f64>() / clip.samples.len() as f64;
            let p_noise = noise.iter().map(|s| s * s).sum::<f64>() / noise.len() as f64;
            let scale = (p_signal / (p_noise * 10f64.powf(snr / 10.0))).sqrt();
            let measured = 10.0 * (p_signal / (scale * scale * p_noise)).log10();
            assert!((measured - snr).abs() <= 0.1, "snr {measured} want {snr}");
            // and the emitted samples are the clamped mixture
            for ((o, s), w) in out.samples.iter().zip(&clip.samples).zip(&noise) {
                assert!((o - (s + scale * w).clamp(-1.0, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let clip = sine(200.0, 16000, 0.5, 0.3);
        let a = add_noise(&clip, NoiseKind::White, 10.0, 7).unwrap();
        let b = add_noise(&clip, NoiseKind::White, 10.0, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = add_noise(&clip, NoiseKind::White, 10.0, 8).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn silent_signal_rejected() {
        let clip = AudioClip::new(vec![0.0; 1000], 16000, "z").unwrap();
        assert!(matches!(
            add_noise(&clip, NoiseKind::White, 10.0, 1),
            Err(AugmentError::SilentSignal)
        ));
    }

    #[test]
    fn pink_noise_has_flat_octave_power() {
        let n = 1 << 16;
        let rate = 16000u32;
        let octaves = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0];
        let band_power = |samples: &[f64]| -> Vec<f64> {
            use rustfft::{num_complex::Complex64, FftPlanner};
            let mut buf: Vec<Complex64> =
                samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            octaves
                .iter()
                .map(|&lo| {
                    let (b0, b1) = (
                        (lo * n as f64 / rate as f64) as usize,
                        (2.0 * lo * n as f64 / rate as f64) as usize,
                    );
                    (b0..b1).map(|b| buf[b].norm_sqr()).sum::<f64>()
                })
                .collect()
        };
        let pink = band_power(&noise_signal(NoiseKind::Pink, n, 3));
        let white = band_power(&noise_signal(NoiseKind::White, n, 3));
        let pink_ratio = pink.last().unwrap() / pink.first().unwrap();
        let white_ratio = white.last().unwrap() / white.first().unwrap();
        // per-octave power is flat for 1/f noise, doubles per octave for white
        assert!(pink_ratio < 4.0, "pink octave ratio {pink_ratio}");
        assert!(white_ratio > 8.0, "white octave ratio {white_ratio}");
    }
}
