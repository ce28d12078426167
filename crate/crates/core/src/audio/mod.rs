//! Audio ingestion: WAV I/O, resampling, and energy-based trimming.
//!
//! Clips are mono `f64` sample buffers in `[-1, 1]`. Stereo input is downmixed
//! on read, integer PCM is scaled by the type maximum, and everything is
//! expected to be resampled to [`crate::CANONICAL_SAMPLE_RATE`] before feature
//! extraction.

mod wav;

use thiserror::Error;

pub use wav::{read_wav, write_wav};

/// Default frame length for voice-activity trimming, in milliseconds.
pub const TRIM_FRAME_MS: f64 = 25.0;
/// Default energy floor for voice-activity trimming, in dBFS.
pub const TRIM_ENERGY_FLOOR_DB: f64 = -45.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV file contains no audio frames")]
    EmptyAudio,
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("all frames fell below the energy floor")]
    EmptyAfterTrim,
    #[error("resample target rate must be positive")]
    BadTargetRate,
    #[error("trim frame length must be positive")]
    BadFrameLength,
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A mono audio clip: normalized samples plus their rate and an opaque origin tag.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    /// Build a clip, enforcing the invariants: nonempty, finite samples in
    /// `[-1, 1]`, positive rate.
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate is zero".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidClip(format!(
                "sample {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Resample a clip to `target_rate` by linear interpolation.
///
/// The output length is `round(len * target_rate / sample_rate)`; a matching
/// rate returns the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::BadTargetRate);
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let in_len = clip.samples.len();
    let out_len =
        ((in_len as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize).max(1);
    let step = clip.sample_rate as f64 / target_rate as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        out.push(sample_at(&clip.samples, i as f64 * step));
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Linear interpolation at a fractional sample position, clamped to the ends.
pub(crate) fn sample_at(samples: &[f64], pos: f64) -> f64 {
    if pos <= 0.0 {
        return samples[0];
    }
    let last = samples.len() - 1;
    if pos >= last as f64 {
        return samples[last];
    }
    let idx = pos.floor() as usize;
    let frac = pos - idx as f64;
    samples[idx] * (1.0 - frac) + samples[idx + 1] * frac
}

/// Drop "dead" stretches: partition into non-overlapping `frame_ms` frames and
/// drop every frame whose RMS level in dBFS falls below `energy_floor_db`.
/// Surviving frames are concatenated in order. A final partial frame is judged
/// on its own samples.
pub fn trim_dead_segments(
    clip: &AudioClip,
    frame_ms: f64,
    energy_floor_db: f64,
) -> Result<AudioClip, AudioError> {
    if !(frame_ms > 0.0) {
        return Err(AudioError::BadFrameLength);
    }
    let frame_len = ((frame_ms * clip.sample_rate as f64 / 1000.0).round() as usize).max(1);
    let mut kept = Vec::with_capacity(clip.samples.len());
    for frame in clip.samples.chunks(frame_len) {
        let rms = (frame.iter().map(|s| s * s).sum::<f64>() / frame.len() as f64).sqrt();
        let db = 20.0 * rms.log10(); // rms == 0 gives -inf, always dropped
        if db >= energy_floor_db {
            kept.extend_from_slice(frame);
        }
    }
    if kept.is_empty() {
        return Err(AudioError::EmptyAfterTrim);
    }
    Ok(AudioClip {
        samples: kept,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}
