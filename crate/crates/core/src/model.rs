//! TDNN language-identification models: declarative layer configs for the
//! classic x-vector baseline and the funnel-shaped enhanced variant,
//! receptive-field analysis, network assembly, inference, and embedding
//! extraction.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    linear, load_checkpoint, save_checkpoint, softmax_rows, tdnn_layer, vstack, AdError,
    CheckpointError, RawParam, Scalar, Value,
};

/// Embedding width of the default model families (first post-pooling layer).
pub const EMBEDDING_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature dim {actual} does not match the model's expected {expected}")]
    FeatureDim { expected: usize, actual: usize },
    #[error("sequence too short: need at least {required} frames, got {actual}")]
    SequenceTooShort { required: usize, actual: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Tdnn,
    StatsPool,
    SegmentLinear,
    Softmax,
}

/// One layer row: tap offsets and dilation only apply to `Tdnn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub taps: Vec<i32>,
    #[serde(default = "default_dilation")]
    pub dilation: u32,
    pub in_dim: usize,
    pub out_dim: usize,
}

fn default_dilation() -> u32 {
    1
}

impl LayerSpec {
    /// Frames this layer's receptive field spans on its own input.
    pub fn span(&self) -> usize {
        match self.kind {
            LayerKind::Tdnn => {
                let min = *self.taps.first().unwrap_or(&0);
                let max = *self.taps.last().unwrap_or(&0);
                ((max - min) as usize) * self.dilation as usize
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
    pub feature_dim: usize,
}

fn tdnn(name: &str, taps: &[i32], dilation: u32, prev_width: usize, out: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Tdnn,
        taps: taps.to_vec(),
        dilation,
        in_dim: taps.len() * prev_width,
        out_dim: out,
    }
}

fn stats_pool(name: &str, per_frame: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::StatsPool,
        taps: Vec::new(),
        dilation: 1,
        in_dim: per_frame,
        out_dim: 2 * per_frame,
    }
}

fn segment(name: &str, in_dim: usize, out_dim: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::SegmentLinear,
        taps: Vec::new(),
        dilation: 1,
        in_dim,
        out_dim,
    }
}

fn softmax_layer(name: &str, in_dim: usize, n_classes: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Softmax,
        taps: Vec::new(),
        dilation: 1,
        in_dim,
        out_dim: n_classes,
    }
}

impl ModelConfig {
    /// Check layer ordering, tap lists, and dimension chaining.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 || self.n_classes == 0 {
            return Err(ModelError::InvalidConfig(
                "feature_dim and n_classes must be positive".into(),
            ));
        }
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        let mut prev_width = self.feature_dim;
        let mut stage = 0u8; // 0 frame, 1 pooled, 2 done
        let mut pool_seen = false;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Tdnn => {
                    if stage != 0 {
                        return err(format!("{}: tdnn layer after pooling", layer.name));
                    }
                    if layer.taps.is_empty() {
                        return err(format!("{}: tdnn layer needs taps", layer.name));
                    }
                    if layer.taps.windows(2).any(|w| w[0] >= w[1]) {
                        return err(format!(
                            "{}: taps must be strictly ascending, got {:?}",
                            layer.name, layer.taps
                        ));
                    }
                    if layer.dilation == 0 {
                        return err(format!("{}: dilation must be positive", layer.name));
                    }
                    let want = layer.taps.len() * prev_width;
                    if layer.in_dim != want {
                        return err(format!(
                            "{}: in_dim {} but |taps| x previous width = {}",
                            layer.name, layer.in_dim, want
                        ));
                    }
                    prev_width = layer.out_dim;
                }
                LayerKind::StatsPool => {
                    if stage != 0 || pool_seen {
                        return err(format!("{}: misplaced stats pooling", layer.name));
                    }
                    if layer.in_dim != prev_width {
                        return err(format!(
                            "{}: in_dim {} but previous width is {prev_width}",
                            layer.name, layer.in_dim
                        ));
                    }
                    if layer.out_dim != 2 * layer.in_dim {
                        return err(format!(
                            "{}: stats pooling must double the width, got {} -> {}",
                            layer.name, layer.in_dim, layer.out_dim
                        ));
                    }
                    pool_seen = true;
                    stage = 1;
                    prev_width = layer.out_dim;
                }
                LayerKind::SegmentLinear => {
                    if stage != 1 {
                        return err(format!("{}: segment layer outside pooled stage", layer.name));
                    }
                    if layer.in_dim != prev_width {
                        return err(format!(
                            "{}: in_dim {} but previous width is {prev_width}",
                            layer.name, layer.in_dim
                        ));
                    }
                    prev_width = layer.out_dim;
                }
                LayerKind::Softmax => {
                    if stage != 1 {
                        return err(format!("{}: softmax outside pooled stage", layer.name));
                    }
                    if layer.in_dim != prev_width {
                        return err(format!(
                            "{}: in_dim {} but previous width is {prev_width}",
                            layer.name, layer.in_dim
                        ));
                    }
                    if layer.out_dim != self.n_classes {
                        return err(format!(
                            "{}: out_dim {} but n_classes is {}",
                            layer.name, layer.out_dim, self.n_classes
                        ));
                    }
                    stage = 2;
                }
            }
        }
        if stage != 2 {
            return err("model must end with a softmax layer after pooling".into());
        }
        Ok(())
    }

    /// Index of the stats-pooling layer.
    fn pool_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::StatsPool)
            .expect("validated config has a pooling layer")
    }

    /// Total receptive-field span of the frame stack in input frames.
    pub fn frame_span(&self) -> usize {
        self.layers.iter().map(|l| l.span()).sum()
    }

    /// Minimum input frames the full forward pass accepts: the frame stack
    /// must leave at least two frames for statistics pooling.
    pub fn min_input_frames(&self) -> usize {
        self.frame_span() + 2
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig = serde_json::from_str(json)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cumulative receptive field after each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Input frames that influence one frame of this layer's output.
    pub total_width: usize,
    /// Minimum input length that yields one output frame under valid
    /// convolution.
    pub min_frames: usize,
}

/// Per-layer receptive-field widths, composing the effective spans
/// `(max_tap - min_tap) * dilation` of the frame stack.
pub fn receptive_field(cfg: &ModelConfig) -> Vec<ReceptiveField> {
    let mut span = 0usize;
    cfg.layers
        .iter()
        .map(|layer| {
            span += layer.span();
            ReceptiveField {
                total_width: span + 1,
                min_frames: span + 1,
            }
        })
        .collect()
}

/// The funnel-shaped model: three searched context layers interleaved with
/// 1x1 layers, hidden widths narrowing 1280 -> 256, pooling to a 512-wide
/// statistics vector and two 512x512 segment layers.
pub fn enhanced_config(feature_dim: usize, n_classes: usize) -> ModelConfig {
    let f = feature_dim;
    let cfg = ModelConfig {
        layers: vec![
            tdnn("frame1", &[-1, 0, 1], 2, f, 1280),
            tdnn("frame2", &[0], 1, 1280, 1280),
            tdnn("frame3", &[-2, -1, 0, 1, 2], 2, 1280, 1024),
            tdnn("frame4", &[0], 1, 1024, 1024),
            tdnn("frame5", &[-1, 1], 1, 1024, 768),
            tdnn("frame6", &[0], 1, 768, 512),
            tdnn("frame7", &[0], 1, 512, 256),
            stats_pool("stats_pooling", 256),
            segment("segment8", 512, 512),
            segment("segment9", 512, 512),
            softmax_layer("softmax", 512, n_classes),
        ],
        n_classes,
        feature_dim,
    };
    debug_assert!(cfg.validate().is_ok());
    cfg
}

/// The classic five-layer x-vector stack: 512-wide frame layers ending in a
/// 1500-wide layer, statistics pooling to 3000, then 3000 -> 512 -> 512.
pub fn baseline_config(feature_dim: usize, n_classes: usize) -> ModelConfig {
    let f = feature_dim;
    let cfg = ModelConfig {
        layers: vec![
            tdnn("frame1", &[-2, -1, 0, 1, 2], 1, f, 512),
            tdnn("frame2", &[-2, 0, 2], 1, 512, 512),
            tdnn("frame3", &[-3, 0, 3], 1, 512, 512),
            tdnn("frame4", &[0], 1, 512, 512),
            tdnn("frame5", &[0], 1, 512, 1500),
            stats_pool("stats_pooling", 1500),
            segment("segment6", 3000, 512),
            segment("segment7", 512, 512),
            softmax_layer("softmax", 512, n_classes),
        ],
        n_classes,
        feature_dim,
    };
    debug_assert!(cfg.validate().is_ok());
    cfg
}

/// Baseline stack with the grid-searched taps on its first three layers.
pub fn baseline_with_grid_taps(feature_dim: usize, n_classes: usize) -> ModelConfig {
    let f = feature_dim;
    let cfg = ModelConfig {
        layers: vec![
            tdnn("frame1", &[-1, 0, 1], 2, f, 512),
            tdnn("frame2", &[-2, -1, 0, 1, 2], 2, 512, 512),
            tdnn("frame3", &[-1, 1], 1, 512, 512),
            tdnn("frame4", &[0], 1, 512, 512),
            tdnn("frame5", &[0], 1, 512, 1500),
            stats_pool("stats_pooling", 1500),
            segment("segment6", 3000, 512),
            segment("segment7", 512, 512),
            softmax_layer("softmax", 512, n_classes),
        ],
        n_classes,
        feature_dim,
    };
    debug_assert!(cfg.validate().is_ok());
    cfg
}

/// Baseline stack with a 1x1 layer inserted after the first and second
/// context layers.
pub fn baseline_with_intermediate_layers(feature_dim: usize, n_classes: usize) -> ModelConfig {
    let f = feature_dim;
    let cfg = ModelConfig {
        layers: vec![
            tdnn("frame1", &[-2, -1, 0, 1, 2], 1, f, 512),
            tdnn("frame2", &[0], 1, 512, 512),
            tdnn("frame3", &[-2, 0, 2], 1, 512, 512),
            tdnn("frame4", &[0], 1, 512, 512),
            tdnn("frame5", &[-3, 0, 3], 1, 512, 512),
            tdnn("frame6", &[0], 1, 512, 512),
            tdnn("frame7", &[0], 1, 512, 1500),
            stats_pool("stats_pooling", 1500),
            segment("segment8", 3000, 512),
            segment("segment9", 512, 512),
            softmax_layer("softmax", 512, n_classes),
        ],
        n_classes,
        feature_dim,
    };
    debug_assert!(cfg.validate().is_ok());
    cfg
}

/// Baseline taps with funnel widths 1280 -> 1024 -> 768 -> 512 -> 256.
pub fn funnel_config(feature_dim: usize, n_classes: usize) -> ModelConfig {
    let f = feature_dim;
    let cfg = ModelConfig {
        layers: vec![
            tdnn("frame1", &[-2, -1, 0, 1, 2], 1, f, 1280),
            tdnn("frame2", &[-2, 0, 2], 1, 1280, 1024),
            tdnn("frame3", &[-3, 0, 3], 1, 1024, 768),
            tdnn("frame4", &[0], 1, 768, 512),
            tdnn("frame5", &[0], 1, 512, 256),
            stats_pool("stats_pooling", 256),
            segment("segment6", 512, 512),
            segment("segment7", 512, 512),
            softmax_layer("softmax", 512, n_classes),
        ],
        n_classes,
        feature_dim,
    };
    debug_assert!(cfg.validate().is_ok());
    cfg
}

/// Symmetric tap list for a context size: odd sizes take `{-k..k}`, even sizes
/// the same without the center.
pub fn taps_for_context(context: usize) -> Vec<i32> {
    if context == 0 {
        return vec![0];
    }
    if context % 2 == 1 {
        let k = (context as i32 - 1) / 2;
        (-k..=k).collect()
    } else {
        let k = context as i32 / 2;
        (-k..=k).filter(|&t| t != 0).collect()
    }
}

/// Rebuild a config with one tdnn layer's context and dilation replaced; the
/// layer's input width is recomputed from its tap count.
pub fn with_tdnn_cell(
    cfg: &ModelConfig,
    layer_index: usize,
    context: usize,
    dilation: u32,
) -> Result<ModelConfig, ModelError> {
    let mut out = cfg.clone();
    let layer = out
        .layers
        .get_mut(layer_index)
        .ok_or_else(|| ModelError::InvalidConfig(format!("no layer {layer_index}")))?;
    if layer.kind != LayerKind::Tdnn {
        return Err(ModelError::InvalidConfig(format!(
            "layer {layer_index} ({}) is not a tdnn layer",
            layer.name
        )));
    }
    let prev_width = if layer_index == 0 {
        cfg.feature_dim
    } else {
        cfg.layers[layer_index - 1].out_dim
    };
    layer.taps = taps_for_context(context);
    layer.dilation = dilation;
    layer.in_dim = layer.taps.len() * prev_width;
    out.validate()?;
    Ok(out)
}

struct Affine<S: Scalar> {
    w: Value<S>,
    b: Value<S>,
}

/// A parameterized model instance.
pub struct Network<S: Scalar> {
    cfg: ModelConfig,
    affines: Vec<Option<Affine<S>>>,
}

impl<S: Scalar> Network<S> {
    /// Fresh network with seeded Xavier-uniform weights and zero biases.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut affines = Vec::with_capacity(cfg.layers.len());
        for layer in &cfg.layers {
            affines.push(match layer.kind {
                LayerKind::StatsPool => None,
                _ => {
                    let (rows, cols) = (layer.in_dim, layer.out_dim);
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    let w = Array2::from_shape_fn((rows, cols), |_| {
                        S::from_f64(rng.random_range(-a..a))
                    });
                    Some(Affine {
                        w: Value::new(w),
                        b: Value::new(Array2::zeros((1, cols))),
                    })
                }
            });
        }
        Ok(Self { cfg, affines })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Flat parameter list in layer order (weight then bias per layer).
    pub fn parameters(&self) -> Vec<Value<S>> {
        self.affines
            .iter()
            .flatten()
            .flat_map(|a| [a.w.clone(), a.b.clone()])
            .collect()
    }

    pub fn named_parameters(&self) -> Vec<(String, Value<S>)> {
        self.cfg
            .layers
            .iter()
            .zip(&self.affines)
            .filter_map(|(spec, aff)| aff.as_ref().map(|a| (spec, a)))
            .flat_map(|(spec, a)| {
                [
                    (format!("{}.weight", spec.name), a.w.clone()),
                    (format!("{}.bias", spec.name), a.b.clone()),
                ]
            })
            .collect()
    }

    fn check_input(&self, feat: &Array2<f64>) -> Result<(), ModelError> {
        if feat.ncols() != self.cfg.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.cfg.feature_dim,
                actual: feat.ncols(),
            });
        }
        let required = self.cfg.min_input_frames();
        if feat.nrows() < required {
            return Err(ModelError::SequenceTooShort {
                required,
                actual: feat.nrows(),
            });
        }
        Ok(())
    }

    fn input_value(&self, feat: &Array2<f64>) -> Value<S> {
        Value::new(feat.mapv(S::from_f64))
    }

    /// Frame stack only: every tdnn layer with ReLU, before pooling.
    fn frame_stack(&self, x: Value<S>) -> Result<Value<S>, ModelError> {
        let pool = self.cfg.pool_index();
        let mut h = x;
        for (spec, aff) in self.cfg.layers[..pool].iter().zip(&self.affines[..pool]) {
            let aff = aff.as_ref().expect("tdnn layers have parameters");
            h = tdnn_layer(&h, &spec.taps, spec.dilation, &aff.w, &aff.b)?.relu();
        }
        Ok(h)
    }

    /// Post-ReLU activations of the last frame layer; used to probe temporal
    /// influence.
    pub fn frame_output(&self, feat: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_input(feat)?;
        let h = self.frame_stack(self.input_value(feat))?;
        Ok(h.with_data(|d| d.mapv(|v| v.to_f64_lossy())))
    }

    fn pooled(&self, feat: &Array2<f64>) -> Result<Value<S>, ModelError> {
        self.check_input(feat)?;
        let h = self.frame_stack(self.input_value(feat))?;
        Ok(h.stats_pool()?)
    }

    /// Batched logits: each clip runs through the frame stack and pooling,
    /// the pooled rows are stacked, and the segment stack finishes in one
    /// pass. Clips may have different lengths.
    pub fn logits_batch(&self, feats: &[Array2<f64>]) -> Result<Value<S>, ModelError> {
        let pooled: Vec<Value<S>> = feats
            .iter()
            .map(|f| self.pooled(f))
            .collect::<Result<_, _>>()?;
        let mut h = vstack(&pooled)?;
        let pool = self.cfg.pool_index();
        for (spec, aff) in self.cfg.layers[pool + 1..]
            .iter()
            .zip(&self.affines[pool + 1..])
        {
            let aff = aff.as_ref().expect("post-pool layers have parameters");
            h = linear(&h, &aff.w, &aff.b)?;
            if spec.kind == LayerKind::SegmentLinear {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Class posteriors for one clip; entries sum to one.
    pub fn posteriors(&self, feat: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits_batch(std::slice::from_ref(feat))?;
        let probs = logits.with_data(|d| softmax_rows(d));
        Ok(probs.row(0).iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// The x-vector: pre-activation output of the first segment layer.
    pub fn extract_xvector(&self, feat: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        let pooled = self.pooled(feat)?;
        let pool = self.cfg.pool_index();
        let first_segment = self.cfg.layers[pool + 1..]
            .iter()
            .position(|l| l.kind == LayerKind::SegmentLinear)
            .map(|i| i + pool + 1)
            .ok_or_else(|| ModelError::InvalidConfig("model has no segment layer".into()))?;
        let aff = self.affines[first_segment]
            .as_ref()
            .expect("segment layer has parameters");
        let emb = linear(&pooled, &aff.w, &aff.b)?;
        Ok(emb.with_data(|d| d.row(0).iter().map(|v| v.to_f64_lossy()).collect()))
    }

    /// Serialize config plus parameters into a checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let params: Vec<RawParam> = self
            .named_parameters()
            .into_iter()
            .map(|(name, v)| {
                let data = v.data_clone();
                let (r, c) = data.dim();
                RawParam {
                    name,
                    dims: vec![r, c],
                    data: data.iter().map(|x| x.to_f64_lossy() as f32).collect(),
                }
            })
            .collect();
        save_checkpoint(path, &self.cfg.to_json(), &params)?;
        Ok(())
    }

    /// Restore a network from a checkpoint.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let raw = load_checkpoint(path)?;
        let cfg = ModelConfig::from_json(&raw.config_json)?;
        let net = Network::init(cfg, 0)?;
        let named = net.named_parameters();
        if named.len() != raw.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} parameters in file, model has {}",
                raw.params.len(),
                named.len()
            )));
        }
        for ((name, value), param) in named.iter().zip(&raw.params) {
            if *name != param.name {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter '{}' in file, expected '{name}'",
                    param.name
                )));
            }
            let (r, c) = value.shape();
            if param.dims != [r, c] {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter '{}' has dims {:?}, expected [{r}, {c}]",
                    param.name, param.dims
                )));
            }
            let data = Array2::from_shape_vec(
                (r, c),
                param.data.iter().map(|&x| S::from_f64(x as f64)).collect(),
            )
            .expect("dims validated");
            value.set_data(data)?;
        }
        let _ = named;
        Ok(net)
    }
}
