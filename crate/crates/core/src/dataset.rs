//! Corpus manifests, balanced selection, speaker-disjoint splits, and the
//! fixed-length chunk batcher that feeds training.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, resample, AudioError};
use crate::features::{
    log_mel_spectrogram, mean_normalize, mfcc, read_feature_cache, write_feature_cache,
    FeatureConfig, FeatureError, FeatureMatrix,
};
use crate::util::derive_seed;
use crate::CANONICAL_SAMPLE_RATE;

const MANIFEST_HEADER: [&str; 4] = ["path", "language", "speaker_id", "duration_s"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(String),
    #[error("unknown language '{language}' at line {line}")]
    UnknownLanguage { language: String, line: usize },
    #[error("language '{0}' has no entries")]
    EmptyLanguage(String),
    #[error("entry {0} is missing a speaker id required for a speaker-disjoint split")]
    MissingSpeakerId(String),
    #[error("invalid split spec: {0}")]
    BadSplitSpec(String),
    #[error("no clip is long enough for the requested chunk length")]
    NoUsableClips,
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub language: String,
    pub speaker_id: Option<String>,
    pub duration_s: f64,
}

/// An ordered list of labelled clips plus the closed language set the labels
/// are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    languages: Vec<String>,
}

impl Manifest {
    /// Build a manifest, deriving the language set from the entries.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let languages: Vec<String> = entries
            .iter()
            .map(|e| e.language.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::from_entries_with_languages(entries, languages)
    }

    /// Build a manifest against a declared closed language set.
    pub fn from_entries_with_languages(
        entries: Vec<ManifestEntry>,
        mut languages: Vec<String>,
    ) -> Result<Self, DatasetError> {
        languages.sort();
        languages.dedup();
        let mut seen = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !languages.contains(&e.language) {
                return Err(DatasetError::UnknownLanguage {
                    language: e.language.clone(),
                    line: i + 2,
                });
            }
            if !(e.duration_s > 0.0) {
                return Err(DatasetError::ParseError {
                    line: i + 2,
                    msg: format!("duration {} must be positive", e.duration_s),
                });
            }
            if !seen.insert(e.path.clone()) {
                return Err(DatasetError::DuplicatePath(e.path.display().to_string()));
            }
        }
        Ok(Self { entries, languages })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    pub fn counts_by_language(&self) -> Vec<(String, usize)> {
        self.languages
            .iter()
            .map(|l| {
                (
                    l.clone(),
                    self.entries.iter().filter(|e| &e.language == l).count(),
                )
            })
            .collect()
    }

    /// Same entries under a possibly wider language set (used by splits so
    /// label indices stay aligned with the parent corpus).
    fn with_parent_languages(&self, entries: Vec<ManifestEntry>) -> Manifest {
        Manifest {
            entries,
            languages: self.languages.clone(),
        }
    }
}

/// Read a manifest CSV with header `path,language,speaker_id,duration_s`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let entries = read_manifest_rows(path.as_ref())?;
    Manifest::from_entries(entries)
}

/// Like [`load_manifest`] but rejects labels outside a declared language set.
pub fn load_manifest_with_languages(
    path: impl AsRef<Path>,
    languages: &[String],
) -> Result<Manifest, DatasetError> {
    let entries = read_manifest_rows(path.as_ref())?;
    Manifest::from_entries_with_languages(entries, languages.to_vec())
}

fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DatasetError::ParseError {
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = rdr.headers().map_err(|e| DatasetError::ParseError {
        line: 1,
        msg: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        return Err(DatasetError::ParseError {
            line: 1,
            msg: format!("header {got:?}, want {MANIFEST_HEADER:?}"),
        });
    }
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DatasetError::ParseError {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(DatasetError::ParseError {
                line,
                msg: format!("{} fields, want 4", rec.len()),
            });
        }
        let duration_s: f64 = rec[3].parse().map_err(|_| DatasetError::ParseError {
            line,
            msg: format!("bad duration '{}'", &rec[3]),
        })?;
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return Err(DatasetError::ParseError {
                line,
                msg: format!("duration {duration_s} must be positive"),
            });
        }
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(DatasetError::ParseError {
                line,
                msg: "path and language must be nonempty".into(),
            });
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(&rec[0]),
            language: rec[1].to_string(),
            speaker_id: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].to_string())
            },
            duration_s,
        });
    }
    Ok(entries)
}

/// Write a manifest CSV.
pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |e: csv::Error| DatasetError::ParseError {
        line: 0,
        msg: e.to_string(),
    };
    let mut wtr = csv::Writer::from_path(path).map_err(io)?;
    wtr.write_record(MANIFEST_HEADER).map_err(io)?;
    for e in &m.entries {
        wtr.write_record([
            e.path.display().to_string(),
            e.language.clone(),
            e.speaker_id.clone().unwrap_or_default(),
            format!("{}", e.duration_s),
        ])
        .map_err(io)?;
    }
    wtr.flush().map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Downsample every language to the size of the smallest one, choosing
/// uniformly without replacement from `seed`. Output is sorted by
/// (language, path).
pub fn balance_by_language(m: &Manifest, seed: u64) -> Result<Manifest, DatasetError> {
    let mut per_lang: Vec<Vec<&ManifestEntry>> = Vec::new();
    for lang in m.languages() {
        let entries: Vec<&ManifestEntry> =
            m.entries.iter().filter(|e| &e.language == lang).collect();
        if entries.is_empty() {
            return Err(DatasetError::EmptyLanguage(lang.clone()));
        }
        per_lang.push(entries);
    }
    let target = per_lang.iter().map(|v| v.len()).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(target * per_lang.len());
    for group in per_lang.iter_mut() {
        group.shuffle(&mut rng);
        selected.extend(group[..target].iter().map(|e| (*e).clone()));
    }
    selected.sort_by(|a, b| (&a.language, &a.path).cmp(&(&b.language, &b.path)));
    Ok(m.with_parent_languages(selected))
}

/// Split fractions plus the speaker-disjoint switch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub speaker_disjoint: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            speaker_disjoint: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        for f in [self.train_frac, self.val_frac, self.test_frac] {
            if !(f > 0.0 && f < 1.0) {
                return Err(DatasetError::BadSplitSpec(format!(
                    "fraction {f} outside (0, 1)"
                )));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadSplitSpec(format!("fractions sum to {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items to the three fractions.
fn allocate(n: usize, fracs: [f64; 3]) -> [usize; 3] {
    let ideal = fracs.map(|f| f * n as f64);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let used: usize = counts.iter().sum();
    let mut order: Vec<usize> = [0, 1, 2].into();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..n - used {
        counts[order[k % 3]] += 1;
    }
    counts
}

/// Partition a manifest into train/val/test. With `speaker_disjoint` the unit
/// of assignment is the speaker: speakers are ordered by a seeded hash and
/// sliced by the fractions, so no speaker crosses splits. Otherwise entries
/// are assigned individually the same way.
pub fn split(
    m: &Manifest,
    spec: &SplitSpec,
) -> Result<(Manifest, Manifest, Manifest), DatasetError> {
    spec.validate()?;
    let fracs = [spec.train_frac, spec.val_frac, spec.test_frac];
    let buckets: Vec<Vec<ManifestEntry>> = if spec.speaker_disjoint {
        let mut speakers = BTreeSet::new();
        for e in &m.entries {
            match &e.speaker_id {
                Some(s) => {
                    speakers.insert(s.clone());
                }
                None => {
                    return Err(DatasetError::MissingSpeakerId(e.path.display().to_string()))
                }
            }
        }
        let mut speakers: Vec<String> = speakers.into_iter().collect();
        speakers.sort_by_key(|s| (derive_seed(spec.seed, s), s.clone()));
        let counts = allocate(speakers.len(), fracs);
        let mut assignment = std::collections::BTreeMap::new();
        let mut at = 0usize;
        for (piece, &count) in counts.iter().enumerate() {
            for s in &speakers[at..at + count] {
                assignment.insert(s.clone(), piece);
            }
            at += count;
        }
        let mut buckets = vec![Vec::new(), Vec::new(), Vec::new()];
        for e in &m.entries {
            let piece = assignment[e.speaker_id.as_ref().unwrap()];
            buckets[piece].push(e.clone());
        }
        buckets
    } else {
        let mut order: Vec<usize> = (0..m.entries.len()).collect();
        order.sort_by_key(|&i| {
            (
                derive_seed(spec.seed, &m.entries[i].path.display().to_string()),
                i,
            )
        });
        let counts = allocate(order.len(), fracs);
        let mut buckets = vec![Vec::new(), Vec::new(), Vec::new()];
        let mut at = 0usize;
        for (piece, &count) in counts.iter().enumerate() {
            let mut idx: Vec<usize> = order[at..at + count].to_vec();
            idx.sort_unstable();
            buckets[piece] = idx.iter().map(|&i| m.entries[i].clone()).collect();
            at += count;
        }
        buckets
    };
    let mut pieces = buckets.into_iter();
    Ok((
        m.with_parent_languages(pieces.next().unwrap()),
        m.with_parent_languages(pieces.next().unwrap()),
        m.with_parent_languages(pieces.next().unwrap()),
    ))
}

/// How clips turn into model-ready feature matrices: frontend config, optional
/// cepstral mean normalization, and an optional cache directory holding raw
/// (pre-normalization) features.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub feature: FeatureConfig,
    pub mean_normalize: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for FeaturePipeline {
    fn default() -> Self {
        Self {
            feature: FeatureConfig::default(),
            mean_normalize: true,
            cache_dir: None,
        }
    }
}

impl FeaturePipeline {
    pub fn feature_dim(&self) -> usize {
        self.feature.feature_dim()
    }

    /// Cache file name for a clip: stable under reruns, keyed on both the
    /// source path and the frontend config.
    pub fn cache_path_for(&self, audio_path: &Path) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let cfg_key = serde_json::to_string(&self.feature).unwrap_or_default();
        let key = format!("{}|{}", audio_path.display(), cfg_key);
        let hash = crate::util::fnv1a64(key.as_bytes());
        let stem = audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        Some(dir.join(format!("{stem}-{hash:016x}.xlf")))
    }

    fn extract_raw(&self, audio_path: &Path) -> Result<FeatureMatrix, DatasetError> {
        let clip = read_wav(audio_path)?;
        let clip = resample(&clip, CANONICAL_SAMPLE_RATE)?;
        let mut feat = log_mel_spectrogram(&clip, &self.feature)?;
        if let Some(n) = self.feature.n_mfcc {
            feat = mfcc(&feat, n)?;
        }
        Ok(feat)
    }

    /// Features for one clip, from the cache when present, with mean
    /// normalization applied after loading.
    pub fn features_for(&self, audio_path: &Path) -> Result<FeatureMatrix, DatasetError> {
        let raw = match self.cache_path_for(audio_path) {
            Some(cache) if cache.is_file() => read_feature_cache(&cache)?,
            _ => self.extract_raw(audio_path)?,
        };
        Ok(if self.mean_normalize {
            mean_normalize(&raw)
        } else {
            raw
        })
    }

    /// Extract raw features and write them to the cache; returns the cache
    /// path and whether the file already existed.
    pub fn extract_and_cache(&self, audio_path: &Path) -> Result<(PathBuf, bool), DatasetError> {
        let cache = self
            .cache_path_for(audio_path)
            .expect("extract_and_cache requires a cache_dir");
        if cache.is_file() {
            return Ok((cache, true));
        }
        let feat = self.extract_raw(audio_path)?;
        write_feature_cache(&feat, &cache)?;
        Ok((cache, false))
    }
}

/// All usable training features held in memory, ready for chunked batching.
pub struct FeatureStore {
    pub feats: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    /// Indices into `feats` with at least `chunk_frames` frames.
    pub usable: Vec<usize>,
    pub skipped: usize,
    pub chunk_frames: usize,
    pub feature_dim: usize,
}

/// Frames a `chunk_s`-second crop spans at the canonical rate.
pub fn chunk_frames(cfg: &FeatureConfig, chunk_s: f64) -> usize {
    let samples = (chunk_s * CANONICAL_SAMPLE_RATE as f64).round() as usize;
    cfg.num_frames(samples, CANONICAL_SAMPLE_RATE).unwrap_or(0)
}

/// Load (or cache-read) features for every manifest entry. Clips shorter than
/// the chunk length stay in the store but are excluded from `usable` and
/// counted in `skipped`.
pub fn load_feature_store(
    m: &Manifest,
    pipe: &FeaturePipeline,
    chunk_s: f64,
) -> Result<FeatureStore, DatasetError> {
    let chunk = chunk_frames(&pipe.feature, chunk_s);
    if chunk == 0 {
        return Err(DatasetError::NoUsableClips);
    }
    let mut feats = Vec::with_capacity(m.len());
    let mut labels = Vec::with_capacity(m.len());
    let mut usable = Vec::new();
    let mut skipped = 0usize;
    for (i, entry) in m.entries().iter().enumerate() {
        let feat = pipe.features_for(&entry.path)?;
        let label = m
            .label_index(&entry.language)
            .expect("entry language in manifest set");
        if feat.num_frames() >= chunk {
            usable.push(i);
        } else {
            skipped += 1;
        }
        feats.push(feat.values);
        labels.push(label);
    }
    Ok(FeatureStore {
        feats,
        labels,
        usable,
        skipped,
        chunk_frames: chunk,
        feature_dim: pipe.feature_dim(),
    })
}

/// One training batch: fixed-shape feature crops plus their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub feats: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

/// One epoch of batches: shuffle the usable clips from `seed`, crop each to
/// `chunk_frames` at a seeded random offset, and emit fixed-size batches with
/// a final partial batch.
pub fn epoch_batches(store: &FeatureStore, batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = store.usable.clone();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk_ids in order.chunks(batch_size) {
        let mut feats = Vec::with_capacity(chunk_ids.len());
        let mut labels = Vec::with_capacity(chunk_ids.len());
        for &i in chunk_ids {
            let total = store.feats[i].nrows();
            let max_off = total - store.chunk_frames;
            let off = if max_off == 0 {
                0
            } else {
                rng.random_range(0..=max_off)
            };
            feats.push(
                store.feats[i]
                    .slice(ndarray::s![off..off + store.chunk_frames, ..])
                    .to_owned(),
            );
            labels.push(store.labels[i]);
        }
        batches.push(Batch { feats, labels });
    }
    batches
}

/// Spec-level convenience: one epoch of batches straight from a manifest.
/// Returns the batches and the number of clips skipped as too short.
pub fn make_batches(
    m: &Manifest,
    pipe: &FeaturePipeline,
    chunk_s: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<Batch>, usize), DatasetError> {
    let store = load_feature_store(m, pipe, chunk_s)?;
    if store.usable.is_empty() {
        return Err(DatasetError::NoUsableClips);
    }
    let skipped = store.skipped;
    Ok((epoch_batches(&store, batch_size, seed), skipped))
}
