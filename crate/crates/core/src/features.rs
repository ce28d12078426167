//! Acoustic feature extraction: framing, log-mel filterbank energies,
//! optional MFCC, cepstral mean normalization, and a binary feature cache.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

/// Log floor added to filterbank energies before taking the natural log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Lowest filterbank edge frequency in Hz.
const MEL_LOW_HZ: f64 = 20.0;

pub const FEATURE_CACHE_MAGIC: &[u8; 4] = b"XLF1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip too short: {samples} samples at {rate} Hz, need at least {required}")]
    TooShort {
        samples: usize,
        required: usize,
        rate: u32,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad feature cache file: {0}")]
    CacheFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

impl FeatureKind {
    fn to_u8(self) -> u8 {
        match self {
            FeatureKind::LogMel => 0,
            FeatureKind::Mfcc => 1,
        }
    }

    fn from_u8(v: u8) -> Result<Self, FeatureError> {
        match v {
            0 => Ok(FeatureKind::LogMel),
            1 => Ok(FeatureKind::Mfcc),
            other => Err(FeatureError::CacheFormat(format!(
                "unknown feature kind {other}"
            ))),
        }
    }
}

/// `T x F` per-frame feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_shift_ms: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Frontend configuration. `n_mfcc = None` keeps log-mel features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub n_mfcc: Option<usize>,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub fft_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 24,
            n_mfcc: None,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            fft_size: 512,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidConfig("n_mels must be positive".into()));
        }
        if !(self.frame_len_ms > 0.0) || !(self.frame_shift_ms > 0.0) {
            return Err(FeatureError::InvalidConfig(
                "frame lengths must be positive".into(),
            ));
        }
        if self.frame_shift_ms > self.frame_len_ms {
            return Err(FeatureError::InvalidConfig(
                "frame_shift_ms must not exceed frame_len_ms".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(FeatureError::InvalidConfig(
                "preemphasis must lie in [0, 1)".into(),
            ));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(FeatureError::InvalidConfig(
                "fft_size must be a power of two".into(),
            ));
        }
        if let Some(n) = self.n_mfcc {
            if n == 0 || n > self.n_mels {
                return Err(FeatureError::InvalidConfig(
                    "n_mfcc must lie in 1..=n_mels".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn frame_len_samples(&self, rate: u32) -> usize {
        (self.frame_len_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        ((self.frame_shift_ms * rate as f64 / 1000.0).round() as usize).max(1)
    }

    /// Number of frames produced from `len` samples: `1 + floor((len - frame_len) / hop)`.
    pub fn num_frames(&self, len: usize, rate: u32) -> Option<usize> {
        let frame = self.frame_len_samples(rate);
        if len < frame {
            return None;
        }
        Some(1 + (len - frame) / self.hop_samples(rate))
    }

    /// Output feature dimension after the optional MFCC stage.
    pub fn feature_dim(&self) -> usize {
        self.n_mfcc.unwrap_or(self.n_mels)
    }
}

/// `y[n] = x[n] - alpha * x[n-1]`, with the first sample passed through.
pub fn preemphasize(samples: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        out.push(if i == 0 { x } else { x - alpha * prev });
        prev = x;
    }
    out
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Pre-emphasize, slice into overlapping frames, and apply a Hamming window.
pub fn frame_signal(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>, FeatureError> {
    cfg.validate()?;
    let frame = cfg.frame_len_samples(clip.sample_rate);
    let hop = cfg.hop_samples(clip.sample_rate);
    let n_frames = cfg
        .num_frames(clip.samples.len(), clip.sample_rate)
        .ok_or(FeatureError::TooShort {
            samples: clip.samples.len(),
            required: frame,
            rate: clip.sample_rate,
        })?;
    let emphasized = preemphasize(&clip.samples, cfg.preemphasis);
    let window = hamming(frame);
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * hop;
        let mut buf = Vec::with_capacity(frame);
        for i in 0..frame {
            buf.push(emphasized[start + i] * window[i]);
        }
        frames.push(buf);
    }
    Ok(frames)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank over FFT bins; filter `k` rises from edge `k` to
/// center `k+1` and falls to edge `k+2`, with edges equally spaced on the mel
/// scale between [`MEL_LOW_HZ`] and Nyquist.
fn mel_filterbank(cfg: &FeatureConfig, rate: u32) -> Vec<Vec<(usize, f64)>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = rate as f64 / cfg.fft_size as f64;
    let mel_lo = hz_to_mel(MEL_LOW_HZ);
    let mel_hi = hz_to_mel(rate as f64 / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|k| {
            let (lo, center, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            let mut taps = Vec::new();
            for bin in 0..n_bins {
                let f = bin as f64 * bin_hz;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    taps.push((bin, w));
                }
            }
            taps
        })
        .collect()
}

/// Center frequencies of the mel filters in Hz.
pub fn mel_filter_centers(cfg: &FeatureConfig, rate: u32) -> Vec<f64> {
    let mel_lo = hz_to_mel(MEL_LOW_HZ);
    let mel_hi = hz_to_mel(rate as f64 / 2.0);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Per-frame log filterbank energies: `ln(sum(power * weight) + LOG_FLOOR)`.
pub fn log_mel_spectrogram(
    clip: &AudioClip,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix, FeatureError> {
    cfg.validate()?;
    let frame = cfg.frame_len_samples(clip.sample_rate);
    if cfg.fft_size < frame {
        return Err(FeatureError::InvalidConfig(format!(
            "fft_size {} smaller than frame length {frame}",
            cfg.fft_size
        )));
    }
    let frames = frame_signal(clip, cfg)?;
    let filters = mel_filterbank(cfg, clip.sample_rate);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;
    let mut values = Array2::zeros((frames.len(), cfg.n_mels));
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let mut power = vec![0.0f64; n_bins];
    for (t, fr) in frames.iter().enumerate() {
        for c in buf.iter_mut() {
            *c = Complex64::default();
        }
        for (i, &x) in fr.iter().enumerate() {
            buf[i].re = x;
        }
        fft.process(&mut buf);
        for (bin, p) in power.iter_mut().enumerate() {
            *p = buf[bin].norm_sqr();
        }
        for (k, taps) in filters.iter().enumerate() {
            let energy: f64 = taps.iter().map(|&(bin, w)| power[bin] * w).sum();
            values[(t, k)] = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(FeatureMatrix {
        values,
        frame_shift_ms: cfg.frame_shift_ms,
        kind: FeatureKind::LogMel,
    })
}

/// Orthonormal type-II DCT along the feature axis, keeping the first `n_mfcc`
/// coefficients.
pub fn mfcc(feat: &FeatureMatrix, n_mfcc: usize) -> Result<FeatureMatrix, FeatureError> {
    if feat.kind != FeatureKind::LogMel {
        return Err(FeatureError::DimensionMismatch(
            "mfcc input must be log-mel features".into(),
        ));
    }
    let f = feat.dim();
    if n_mfcc == 0 || n_mfcc > f {
        return Err(FeatureError::DimensionMismatch(format!(
            "n_mfcc {n_mfcc} out of range for {f} filters"
        )));
    }
    let t = feat.num_frames();
    let mut basis = Array2::zeros((f, n_mfcc));
    for j in 0..n_mfcc {
        let scale = if j == 0 {
            (1.0 / f as f64).sqrt()
        } else {
            (2.0 / f as f64).sqrt()
        };
        for n in 0..f {
            basis[(n, j)] =
                scale * (std::f64::consts::PI * j as f64 * (n as f64 + 0.5) / f as f64).cos();
        }
    }
    let values = feat.values.dot(&basis);
    debug_assert_eq!(values.dim(), (t, n_mfcc));
    Ok(FeatureMatrix {
        values,
        frame_shift_ms: feat.frame_shift_ms,
        kind: FeatureKind::Mfcc,
    })
}

/// Subtract the per-feature mean over time (cepstral mean normalization).
pub fn mean_normalize(feat: &FeatureMatrix) -> FeatureMatrix {
    let t = feat.num_frames() as f64;
    let mut values = feat.values.clone();
    for mut col in values.columns_mut() {
        let mean = col.sum() / t;
        col.mapv_inplace(|v| v - mean);
    }
    FeatureMatrix {
        values,
        frame_shift_ms: feat.frame_shift_ms,
        kind: feat.kind,
    }
}

fn cache_io_err(path: &Path, source: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a feature matrix as `XLF1 | T u32 | F u32 | shift f32 | kind u8 | f32 data`.
pub fn write_feature_cache(
    feat: &FeatureMatrix,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let (t, f) = feat.values.dim();
    let mut out = Vec::with_capacity(17 + t * f * 4);
    out.extend_from_slice(FEATURE_CACHE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(feat.frame_shift_ms as f32).to_le_bytes());
    out.push(feat.kind.to_u8());
    for row in feat.values.rows() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| cache_io_err(path, e))?;
    file.write_all(&out).map_err(|e| cache_io_err(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| cache_io_err(path, e))?;
    if bytes.len() < 17 || &bytes[0..4] != FEATURE_CACHE_MAGIC {
        return Err(FeatureError::CacheFormat("missing XLF1 magic".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frame_shift_ms = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    let kind = FeatureKind::from_u8(bytes[16])?;
    let expected = 17 + t * f * 4;
    if bytes.len() != expected {
        return Err(FeatureError::CacheFormat(format!(
            "payload is {} bytes, want {expected}",
            bytes.len()
        )));
    }
    let mut values = Array2::zeros((t, f));
    for i in 0..t {
        for j in 0..f {
            let at = 17 + (i * f + j) * 4;
            values[(i, j)] = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
        }
    }
    Ok(FeatureMatrix {
        values,
        frame_shift_ms,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> AudioClip {
        let n = (secs * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(samples, rate, "tone").unwrap()
    }

    #[test]
    fn frame_count_one_second() {
        let clip = AudioClip::new(vec![0.1; 16000], 16000, "c").unwrap();
        let frames = frame_signal(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(frames.len(), 98);
    }

    #[test]
    fn frame_count_two_seconds() {
        let clip = AudioClip::new(vec![0.1; 32000], 16000, "c").unwrap();
        let feat = log_mel_spectrogram(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(feat.num_frames(), 198);
    }

    #[test]
    fn too_short_clip_errors() {
        let clip = AudioClip::new(vec![0.1; 100], 16000, "c").unwrap();
        assert!(matches!(
            frame_signal(&clip, &FeatureConfig::default()),
            Err(FeatureError::TooShort { .. })
        ));
    }

    #[test]
    fn preemphasis_zero_alpha_is_identity() {
        let x = vec![0.3, -0.2, 0.9];
        assert_eq!(preemphasize(&x, 0.0), x);
    }

    #[test]
    fn preemphasis_of_dc() {
        let x = vec![0.5; 10];
        let y = preemphasize(&x, 0.97);
        assert_eq!(y[0], 0.5);
        for &v in &y[1..] {
            assert!((v - 0.03 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_gives_log_floor() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000, "c").unwrap();
        let feat = log_mel_spectrogram(&clip, &FeatureConfig::default()).unwrap();
        let want = LOG_FLOOR.ln();
        for &v in feat.values.iter() {
            assert_eq!(v, want);
        }
    }

    #[test]
    fn tone_at_filter_center_peaks_in_that_filter() {
        let cfg = FeatureConfig::default();
        // independent center-frequency computation from the mel formulas
        let centers: Vec<f64> = {
            let lo = 2595.0 * (1.0 + 20.0 / 700.0f64).log10();
            let hi = 2595.0 * (1.0 + 8000.0 / 700.0f64).log10();
            (1..=cfg.n_mels)
                .map(|i| {
                    let mel = lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64;
                    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
                })
                .collect()
        };
        for &k in &[4usize, 10, 17] {
            let clip = tone(centers[k], 16000, 1.0);
            let feat = log_mel_spectrogram(&clip, &cfg).unwrap();
            let mean_energy: Vec<f64> = (0..cfg.n_mels)
                .map(|j| feat.values.column(j).sum() / feat.num_frames() as f64)
                .collect();
            let argmax = mean_energy
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "tone at {:.1} Hz", centers[k]);
        }
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let clip = tone(440.0, 16000, 0.5);
        let a = log_mel_spectrogram(&clip, &FeatureConfig::default()).unwrap();
        let b = log_mel_spectrogram(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mfcc_of_constant_rows() {
        let f = 24;
        let c = 1.7;
        let feat = FeatureMatrix {
            values: Array2::from_elem((3, f), c),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let out = mfcc(&feat, 13).unwrap();
        for i in 0..3 {
            assert!((out.values[(i, 0)] - c * (f as f64).sqrt()).abs() < 1e-9);
            for j in 1..13 {
                assert!(out.values[(i, j)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mfcc_full_rank_round_trips() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = 24;
        let values = Array2::from_shape_fn((10, f), |_| rng.random_range(-2.0..2.0));
        let feat = FeatureMatrix {
            values: values.clone(),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let coeffs = mfcc(&feat, f).unwrap();
        // invert: X = C . basis^T, with the same orthonormal basis
        let mut basis = Array2::zeros((f, f));
        for j in 0..f {
            let scale = if j == 0 {
                (1.0 / f as f64).sqrt()
            } else {
                (2.0 / f as f64).sqrt()
            };
            for n in 0..f {
                basis[(n, j)] =
                    scale * (std::f64::consts::PI * j as f64 * (n as f64 + 0.5) / f as f64).cos();
            }
        }
        let back = coeffs.values.dot(&basis.t());
        for (a, b) in back.iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mfcc_matches_naive_dct_sum() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (t, f, n) = (10, 24, 13);
        let values = Array2::from_shape_fn((t, f), |_| rng.random_range(-2.0..2.0));
        let feat = FeatureMatrix {
            values: values.clone(),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let fast = mfcc(&feat, n).unwrap();
        for i in 0..t {
            for j in 0..n {
                let scale = if j == 0 {
                    (1.0 / f as f64).sqrt()
                } else {
                    (2.0 / f as f64).sqrt()
                };
                let mut sum = 0.0;
                for k in 0..f {
                    sum += values[(i, k)]
                        * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / f as f64).cos();
                }
                assert!((fast.values[(i, j)] - scale * sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mfcc_rejects_wrong_kind_or_width() {
        let feat = FeatureMatrix {
            values: Array2::zeros((2, 8)),
            frame_shift_ms: 10.0,
            kind: FeatureKind::Mfcc,
        };
        assert!(mfcc(&feat, 4).is_err());
        let logmel = FeatureMatrix {
            kind: FeatureKind::LogMel,
            ..feat
        };
        assert!(mfcc(&logmel, 9).is_err());
    }

    #[test]
    fn mean_normalize_zeroes_columns() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let feat = FeatureMatrix {
            values: Array2::from_shape_fn((20, 6), |_| rng.random_range(-3.0..3.0)),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let out = mean_normalize(&feat);
        for col in out.values.columns() {
            assert!((col.sum() / 20.0).abs() <= 1e-9);
        }
        // idempotent
        let again = mean_normalize(&out);
        for (a, b) in again.values.iter().zip(out.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_normalize_single_frame_is_zero() {
        let feat = FeatureMatrix {
            values: Array2::from_elem((1, 4), 2.3),
            frame_shift_ms: 10.0,
            kind: FeatureKind::LogMel,
        };
        let out = mean_normalize(&feat);
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.xlf");
        let clip = tone(523.0, 16000, 0.4);
        let feat = log_mel_spectrogram(&clip, &FeatureConfig::default()).unwrap();
        write_feature_cache(&feat, &path).unwrap();
        let back = read_feature_cache(&path).unwrap();
        assert_eq!(back.kind, feat.kind);
        assert_eq!(back.values.dim(), feat.values.dim());
        assert_eq!(back.frame_shift_ms as f32, feat.frame_shift_ms as f32);
        for (a, b) in back.values.iter().zip(feat.values.iter()) {
            // storage is f32
            assert!((a - b).abs() <= (b.abs() + 1.0) * f32::EPSILON as f64 * 2.0);
        }
    }

    #[test]
    fn cache_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xlf");
        std::fs::write(&path, b"NOPE.............").unwrap();
        assert!(matches!(
            read_feature_cache(&path),
            Err(FeatureError::CacheFormat(_))
        ));
    }
}
