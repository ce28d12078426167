//! Training loop, context/dilation grid search, evaluation with confusion
//! matrices, and the ablation runner comparing the model variants.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_corpus, AugmentError, AugmentSpec};
use crate::autodiff::{
    backward, softmax_cross_entropy, Optimizer, OptimizerSettings, Scalar,
};
use crate::dataset::{
    chunk_frames, epoch_batches, load_feature_store, DatasetError, FeaturePipeline, Manifest,
};
use crate::model::{
    baseline_config, baseline_with_grid_taps, baseline_with_intermediate_layers, enhanced_config,
    funnel_config, with_tdnn_cell, LayerKind, ModelConfig, ModelError, Network,
};

/// Evaluation center-crops utterances longer than this many frames.
pub const MAX_EVAL_FRAMES: usize = 3000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("loss diverged at epoch {epoch}{}", match .checkpoint { Some(p) => format!("; last good checkpoint at {}", p.display()), None => String::new() })]
    Diverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<crate::autodiff::AdError> for TrainError {
    fn from(e: crate::autodiff::AdError) -> Self {
        TrainError::Model(ModelError::Ad(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision '{other}', use f32 or f64")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_dir: PathBuf,
    pub chunk_s: f64,
    pub pipeline: FeaturePipeline,
}

impl TrainConfig {
    pub fn new(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            precision: Precision::F32,
            checkpoint_dir: checkpoint_dir.into(),
            chunk_s: 3.0,
            pipeline: FeaturePipeline::default(),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Invalid("batch_size must be at least 1".into()));
        }
        if !(self.chunk_s > 0.0) {
            return Err(TrainError::Invalid("chunk_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Metrics of one training or evaluation run. The confusion matrix is indexed
/// `[true language][predicted language]` in `languages` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub languages: Vec<String>,
    pub wall_time_s: f64,
    pub selected_hparams: BTreeMap<String, String>,
}

impl RunReport {
    pub fn total_evaluated(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Trace over total of the confusion matrix.
    pub fn accuracy(&self) -> f64 {
        let trace: u64 = self
            .confusion
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        let total = self.total_evaluated();
        if total == 0 {
            0.0
        } else {
            trace as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Confusion matrix as CSV with a language header row/column.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.languages {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&self.languages[i]);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text rendering of the confusion matrix.
    pub fn confusion_text(&self) -> String {
        let width = self
            .languages
            .iter()
            .map(|l| l.len())
            .chain(
                self.confusion
                    .iter()
                    .flatten()
                    .map(|v| v.to_string().len()),
            )
            .max()
            .unwrap_or(1)
            .max(4);
        let mut out = format!("{:>width$} |", "");
        for l in &self.languages {
            out.push_str(&format!(" {l:>width$}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat((width + 2) + self.languages.len() * (width + 1)));
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:>width$} |", self.languages[i]));
            for v in row {
                out.push_str(&format!(" {v:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub checkpoint: PathBuf,
}

/// Train a model, tracking per-epoch metrics and keeping the checkpoint with
/// the best validation accuracy (earlier epoch wins ties).
pub fn train(
    cfg: &ModelConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    match tc.precision {
        Precision::F32 => train_impl::<f32>(cfg, train_m, val_m, tc),
        Precision::F64 => train_impl::<f64>(cfg, train_m, val_m, tc),
    }
}

fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn check_setup(
    cfg: &ModelConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    tc: &TrainConfig,
) -> Result<(), TrainError> {
    tc.validate()?;
    cfg.validate()?;
    if train_m.is_empty() || val_m.is_empty() {
        return Err(TrainError::Invalid(
            "train and validation manifests must be nonempty".into(),
        ));
    }
    if train_m.languages() != val_m.languages() {
        return Err(TrainError::Invalid(
            "train and validation manifests declare different language sets".into(),
        ));
    }
    if train_m.languages().len() != cfg.n_classes {
        return Err(TrainError::Invalid(format!(
            "model has {} classes but the corpus declares {} languages",
            cfg.n_classes,
            train_m.languages().len()
        )));
    }
    if tc.pipeline.feature_dim() != cfg.feature_dim {
        return Err(TrainError::Invalid(format!(
            "model expects {}-dim features but the pipeline produces {}",
            cfg.feature_dim,
            tc.pipeline.feature_dim()
        )));
    }
    let chunk = chunk_frames(&tc.pipeline.feature, tc.chunk_s);
    if chunk < cfg.min_input_frames() {
        return Err(TrainError::Invalid(format!(
            "chunk of {chunk} frames is below the model minimum of {}",
            cfg.min_input_frames()
        )));
    }
    Ok(())
}

/// Whole-utterance features for evaluation, center-cropped to
/// [`MAX_EVAL_FRAMES`] when longer.
fn eval_features(
    m: &Manifest,
    pipe: &FeaturePipeline,
) -> Result<Vec<(Array2<f64>, usize)>, TrainError> {
    let mut out = Vec::with_capacity(m.len());
    for entry in m.entries() {
        let feat = pipe.features_for(&entry.path)?;
        let label = m
            .label_index(&entry.language)
            .expect("entry language in manifest set");
        let values = if feat.num_frames() > MAX_EVAL_FRAMES {
            let off = (feat.num_frames() - MAX_EVAL_FRAMES) / 2;
            feat.values
                .slice(ndarray::s![off..off + MAX_EVAL_FRAMES, ..])
                .to_owned()
        } else {
            feat.values
        };
        out.push((values, label));
    }
    Ok(out)
}

fn eval_on<S: Scalar>(
    net: &Network<S>,
    items: &[(Array2<f64>, usize)],
    n_classes: usize,
) -> Result<(f64, f64, Vec<Vec<u64>>), TrainError> {
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut loss = 0.0f64;
    for (feat, label) in items {
        let p = net.posteriors(feat)?;
        let pred = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite posterior"))
            .map(|(i, _)| i)
            .expect("nonempty posteriors");
        confusion[*label][pred] += 1;
        loss -= p[*label].max(1e-300).ln();
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
    Ok((
        loss / total.max(1) as f64,
        trace as f64 / total.max(1) as f64,
        confusion,
    ))
}

fn train_impl<S: Scalar>(
    cfg: &ModelConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    check_setup(cfg, train_m, val_m, tc)?;
    let started = Instant::now();
    let store = load_feature_store(train_m, &tc.pipeline, tc.chunk_s)?;
    if store.usable.is_empty() {
        return Err(DatasetError::NoUsableClips.into());
    }
    let val_items = eval_features(val_m, &tc.pipeline)?;
    let n_classes = cfg.n_classes;

    std::fs::create_dir_all(&tc.checkpoint_dir).map_err(|e| TrainError::Io {
        path: tc.checkpoint_dir.display().to_string(),
        source: e,
    })?;
    let ckpt_path = tc.checkpoint_dir.join("best.ckpt");

    let net: Network<S> = Network::init(cfg.clone(), tc.seed)?;
    let params = net.parameters();
    let mut opt = Optimizer::new(tc.optimizer.clone(), &params);

    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut best_epoch: Option<usize> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_confusion: Vec<Vec<u64>> = vec![vec![0; n_classes]; n_classes];

    for epoch in 0..tc.epochs {
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        for batch in epoch_batches(&store, tc.batch_size, epoch_seed(tc.seed, epoch)) {
            let logits = net.logits_batch(&batch.feats)?;
            let loss = softmax_cross_entropy(&logits, &batch.labels)?;
            let loss_v = loss.with_data(|d| d[(0, 0)].to_f64_lossy());
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    checkpoint: best_epoch.map(|_| ckpt_path.clone()),
                });
            }
            backward(&loss)?;
            opt.step(&params);
            let n = batch.labels.len();
            loss_sum += loss_v * n as f64;
            seen += n;
            logits.with_data(|d| {
                for (i, &label) in batch.labels.iter().enumerate() {
                    let row = d.row(i);
                    let pred = (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite logit"))
                        .unwrap();
                    if pred == label {
                        correct += 1;
                    }
                }
            });
        }
        let (val_loss, val_acc, confusion) = eval_on(&net, &val_items, n_classes)?;
        epochs.push(EpochMetrics {
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_accuracy: val_acc,
        });
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = Some(epoch);
            best_confusion = confusion;
            net.save(&ckpt_path)?;
        }
    }

    let report = RunReport {
        epochs,
        best_epoch,
        best_val_accuracy: best_acc,
        confusion: best_confusion,
        languages: train_m.languages().to_vec(),
        wall_time_s: started.elapsed().as_secs_f64(),
        selected_hparams: BTreeMap::new(),
    };
    Ok(TrainOutcome {
        report,
        checkpoint: ckpt_path,
    })
}

/// Evaluate a checkpoint on a test manifest with whole-utterance inference.
/// Writes `confusion.csv` and `confusion.txt` into `out_dir` when given.
pub fn evaluate(
    cfg: &ModelConfig,
    checkpoint: &Path,
    test_m: &Manifest,
    pipeline: &FeaturePipeline,
    precision: Precision,
    out_dir: Option<&Path>,
) -> Result<RunReport, TrainError> {
    match precision {
        Precision::F32 => evaluate_impl::<f32>(cfg, checkpoint, test_m, pipeline, out_dir),
        Precision::F64 => evaluate_impl::<f64>(cfg, checkpoint, test_m, pipeline, out_dir),
    }
}

fn evaluate_impl<S: Scalar>(
    cfg: &ModelConfig,
    checkpoint: &Path,
    test_m: &Manifest,
    pipeline: &FeaturePipeline,
    out_dir: Option<&Path>,
) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    if test_m.is_empty() {
        return Err(TrainError::Invalid("test manifest is empty".into()));
    }
    if test_m.languages().len() != cfg.n_classes {
        return Err(TrainError::Invalid(format!(
            "model has {} classes but the corpus declares {} languages",
            cfg.n_classes,
            test_m.languages().len()
        )));
    }
    let started = Instant::now();
    let net: Network<S> = Network::load(checkpoint)?;
    if net.config() != cfg {
        return Err(ModelError::CheckpointMismatch(format!(
            "checkpoint config disagrees with the requested config ({})",
            checkpoint.display()
        ))
        .into());
    }
    let items = eval_features(test_m, pipeline)?;
    let (loss, acc, confusion) = eval_on(&net, &items, cfg.n_classes)?;
    let report = RunReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: acc,
        confusion,
        languages: test_m.languages().to_vec(),
        wall_time_s: started.elapsed().as_secs_f64(),
        selected_hparams: BTreeMap::from([("eval_loss".to_string(), format!("{loss}"))]),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        for (name, contents) in [
            ("confusion.csv", report.confusion_csv()),
            ("confusion.txt", report.confusion_text()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| TrainError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    Ok(report)
}

/// Grid over context sizes and dilations for one tdnn layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchSpace {
    pub layer_index: usize,
    pub context_sizes: Vec<usize>,
    pub dilations: Vec<u32>,
    pub epochs_per_cell: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCellResult {
    pub context: usize,
    pub dilation: u32,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best: GridCellResult,
    pub table: Vec<GridCellResult>,
}

impl GridSearchOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes")
    }

    /// Results as an aligned text table, one row per cell.
    pub fn table_text(&self) -> String {
        let mut out = String::from("context dilation accuracy     loss  status\n");
        for c in &self.table {
            let (acc, loss) = (
                c.val_accuracy
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                c.val_loss
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
            let status = match &c.status {
                CellStatus::Ok => "ok".to_string(),
                CellStatus::Invalid(m) => format!("invalid: {m}"),
            };
            out.push_str(&format!(
                "{:>7} {:>8} {acc:>8} {loss:>8}  {status}\n",
                c.context, c.dilation
            ));
        }
        out
    }
}

/// Train one model per (context, dilation) cell over a single tdnn layer and
/// pick the best validation accuracy. Ties prefer the lower dilation, then
/// the lower context size, then declaration order. Cells whose receptive
/// field exceeds the training chunk are recorded as invalid and excluded.
pub fn grid_search(
    space: &GridSearchSpace,
    base_cfg: &ModelConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    tc: &TrainConfig,
) -> Result<GridSearchOutcome, TrainError> {
    if space.context_sizes.is_empty() || space.dilations.is_empty() {
        return Err(TrainError::Invalid("empty grid-search space".into()));
    }
    if space.epochs_per_cell == 0 {
        return Err(TrainError::Invalid("epochs_per_cell must be at least 1".into()));
    }
    match base_cfg.layers.get(space.layer_index) {
        Some(l) if l.kind == LayerKind::Tdnn => {}
        Some(l) => {
            return Err(TrainError::Invalid(format!(
                "layer {} ({}) is not a tdnn layer",
                space.layer_index, l.name
            )))
        }
        None => {
            return Err(TrainError::Invalid(format!(
                "layer index {} out of range",
                space.layer_index
            )))
        }
    }
    let chunk = chunk_frames(&tc.pipeline.feature, tc.chunk_s);
    let mut table = Vec::with_capacity(space.context_sizes.len() * space.dilations.len());
    for &context in &space.context_sizes {
        for &dilation in &space.dilations {
            let cell_cfg = match with_tdnn_cell(base_cfg, space.layer_index, context, dilation) {
                Ok(cfg) => cfg,
                Err(e) => {
                    table.push(GridCellResult {
                        context,
                        dilation,
                        val_accuracy: None,
                        val_loss: None,
                        status: CellStatus::Invalid(e.to_string()),
                    });
                    continue;
                }
            };
            if cell_cfg.min_input_frames() > chunk {
                table.push(GridCellResult {
                    context,
                    dilation,
                    val_accuracy: None,
                    val_loss: None,
                    status: CellStatus::Invalid(format!(
                        "receptive field needs {} frames, chunk has {chunk}",
                        cell_cfg.min_input_frames()
                    )),
                });
                continue;
            }
            let mut cell_tc = tc.clone();
            cell_tc.epochs = space.epochs_per_cell;
            cell_tc.checkpoint_dir = tc
                .checkpoint_dir
                .join(format!("cell_c{context}_d{dilation}"));
            let outcome = train(&cell_cfg, train_m, val_m, &cell_tc)?;
            let best = outcome.report.best_epoch.expect("at least one epoch ran");
            table.push(GridCellResult {
                context,
                dilation,
                val_accuracy: Some(outcome.report.best_val_accuracy),
                val_loss: Some(outcome.report.epochs[best].val_loss),
                status: CellStatus::Ok,
            });
        }
    }
    let mut best: Option<&GridCellResult> = None;
    for cell in &table {
        let Some(acc) = cell.val_accuracy else {
            continue;
        };
        let better = match best {
            None => true,
            Some(b) => {
                let bacc = b.val_accuracy.unwrap();
                acc > bacc
                    || (acc == bacc
                        && (cell.dilation < b.dilation
                            || (cell.dilation == b.dilation && cell.context < b.context)))
            }
        };
        if better {
            best = Some(cell);
        }
    }
    let best = best
        .cloned()
        .ok_or_else(|| TrainError::Invalid("no valid cell in the grid".into()))?;
    Ok(GridSearchOutcome { best, table })
}

/// Labelled accuracy rows of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5);
        let mut out = format!("{:<width$}  accuracy\n", "model");
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:.4}\n", r.label, r.accuracy));
        }
        out
    }
}

pub const ABLATION_LABELS: [&str; 6] = [
    "Baseline",
    "Grid Search",
    "Intermediate Layers",
    "Funnel Structure",
    "Integrated Approach",
    "Final Model",
];

/// Train and evaluate every model variant under identical seeds and budgets:
/// the plain baseline, the three single modifications, their integration, and
/// the integrated model on augmented data.
pub fn run_ablation(
    train_m: &Manifest,
    val_m: &Manifest,
    work_dir: &Path,
    tc: &TrainConfig,
    augment_spec: &AugmentSpec,
) -> Result<AblationReport, TrainError> {
    let f = tc.pipeline.feature_dim();
    let l = train_m.languages().len();
    let variants: [(&str, ModelConfig); 5] = [
        (ABLATION_LABELS[0], baseline_config(f, l)),
        (ABLATION_LABELS[1], baseline_with_grid_taps(f, l)),
        (ABLATION_LABELS[2], baseline_with_intermediate_layers(f, l)),
        (ABLATION_LABELS[3], funnel_config(f, l)),
        (ABLATION_LABELS[4], enhanced_config(f, l)),
    ];
    let mut rows = Vec::with_capacity(6);
    for (label, cfg) in &variants {
        let mut run_tc = tc.clone();
        run_tc.checkpoint_dir = work_dir.join(slug(label));
        let outcome = train(cfg, train_m, val_m, &run_tc)?;
        rows.push(AblationRow {
            label: label.to_string(),
            accuracy: outcome.report.best_val_accuracy,
        });
    }

    let aug_dir = work_dir.join("augmented");
    std::fs::create_dir_all(&aug_dir).map_err(|e| TrainError::Io {
        path: aug_dir.display().to_string(),
        source: e,
    })?;
    let augmented = augment_corpus(train_m, augment_spec, &aug_dir)?;
    let mut run_tc = tc.clone();
    run_tc.checkpoint_dir = work_dir.join(slug(ABLATION_LABELS[5]));
    let outcome = train(&enhanced_config(f, l), &augmented, val_m, &run_tc)?;
    rows.push(AblationRow {
        label: ABLATION_LABELS[5].to_string(),
        accuracy: outcome.report.best_val_accuracy,
    });

    Ok(AblationReport { rows })
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}
