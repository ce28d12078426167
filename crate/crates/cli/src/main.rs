//! `xlid` — one binary driving the whole pipeline: feature caching, corpus
//! augmentation, training, grid search, evaluation, embedding extraction, and
//! the ablation table.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 usage error,
//! 2 data error, 3 numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xlid_core::augment::{augment_corpus, AugmentError, AugmentSpec, NoiseKind};
use xlid_core::autodiff::{OptimizerKind, OptimizerSettings, Scalar};
use xlid_core::dataset::{
    load_manifest, load_manifest_with_languages, save_manifest, DatasetError, FeaturePipeline,
    Manifest,
};
use xlid_core::features::FeatureConfig;
use xlid_core::model::{
    baseline_config, enhanced_config, ModelConfig, ModelError, Network,
};
use xlid_core::training::{
    evaluate, grid_search, run_ablation, train, GridSearchSpace, Precision, TrainConfig,
    TrainError,
};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Invalid(_) => CliError::Usage(e.to_string()),
            TrainError::Model(ModelError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::FactorOutOfRange(_)
            | AugmentError::ShiftOutOfRange(_)
            | AugmentError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_data(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "xlid", version, about = "Spoken language identification pipeline")]
struct Cli {
    /// Base seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Numeric precision for model arithmetic.
    #[arg(long, global = true, default_value = "f32", value_parser = Precision::from_str)]
    precision: Precision,
    /// Suppress progress output; diagnostics still go to stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FeatureArgs {
    /// Mel filterbank size (the model's feature dimension unless MFCCs are on).
    #[arg(long, default_value_t = 24)]
    n_mels: usize,
    /// Keep this many DCT coefficients instead of raw log-mel features.
    #[arg(long)]
    n_mfcc: Option<usize>,
    #[arg(long, default_value_t = 25.0)]
    frame_len_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    frame_shift_ms: f64,
    #[arg(long, default_value_t = 0.97)]
    preemphasis: f64,
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    /// Skip cepstral mean normalization.
    #[arg(long)]
    no_mean_norm: bool,
    /// Feature cache directory (XLID_CACHE_DIR overrides).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl FeatureArgs {
    fn pipeline(&self) -> FeaturePipeline {
        let cache_dir = std::env::var_os("XLID_CACHE_DIR")
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone());
        FeaturePipeline {
            feature: FeatureConfig {
                n_mels: self.n_mels,
                n_mfcc: self.n_mfcc,
                frame_len_ms: self.frame_len_ms,
                frame_shift_ms: self.frame_shift_ms,
                preemphasis: self.preemphasis,
                fft_size: self.fft_size,
            },
            mean_normalize: !self.no_mean_norm,
            cache_dir,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest CSV.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest CSV.
    #[arg(long)]
    val: PathBuf,
    /// Where checkpoints and reports land.
    #[arg(long)]
    checkpoint_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Enhanced)]
    model: ModelArg,
    /// JSON model config overriding --model.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Training crop length in seconds.
    #[arg(long, default_value_t = 3.0)]
    chunk_s: f64,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Enhanced,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and cache features for every clip in a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache output directory.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Write augmented copies of a corpus plus their manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Speed factors (1.0 passes through).
        #[arg(long, value_delimiter = ',', default_values_t = [0.9, 1.0, 1.1])]
        speed: Vec<f64>,
        /// Pitch shifts in semitones.
        #[arg(long, value_delimiter = ',', default_values_t = [-2.0, -1.0, 1.0, 2.0], allow_negative_numbers = true)]
        pitch: Vec<f64>,
        /// Noise kinds: white, pink, gaussian.
        #[arg(long, value_delimiter = ',', default_values = ["gaussian"], value_parser = NoiseKind::from_str)]
        noise: Vec<NoiseKind>,
        #[arg(long, default_value_t = 5.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 20.0)]
        snr_max: f64,
    },
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Sweep context size and dilation for one tdnn layer.
    GridSearch {
        #[command(flatten)]
        args: TrainArgs,
        /// Index of the tdnn layer to sweep.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 5, 7])]
        contexts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 3])]
        dilations: Vec<u32>,
        #[arg(long, default_value_t = 3)]
        epochs_per_cell: usize,
    },
    /// Evaluate a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Write one x-vector per clip as CSV rows `source_id,e0,...,e511`.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Train and evaluate every model variant under one budget.
    Ablation {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 3.0)]
        chunk_s: f64,
        #[command(flatten)]
        features: FeatureArgs,
    },
}

/// Record of what produced a directory's outputs, for reruns and audits.
fn write_run_manifest(dir: &Path, cli: &Cli) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_data(dir, e))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let doc = serde_json::json!({
        "tool": "xlid",
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "seed": cli.seed,
        "precision": match cli.precision { Precision::F32 => "f32", Precision::F64 => "f64" },
    });
    let path = dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| io_data(&path, e))
}

fn train_config(cli: &Cli, args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: OptimizerSettings {
            kind: match args.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            },
            learning_rate: args.learning_rate,
            ..OptimizerSettings::default()
        },
        seed: cli.seed,
        precision: cli.precision,
        checkpoint_dir: args.checkpoint_dir.clone(),
        chunk_s: args.chunk_s,
        pipeline: args.features.pipeline(),
    }
}

fn model_config(args: &TrainArgs, train_m: &Manifest) -> Result<ModelConfig, CliError> {
    if let Some(path) = &args.model_config {
        let json = std::fs::read_to_string(path).map_err(|e| io_data(path, e))?;
        return Ok(ModelConfig::from_json(&json)?);
    }
    let f = args.features.pipeline().feature_dim();
    let l = train_m.languages().len();
    Ok(match args.model {
        ModelArg::Enhanced => enhanced_config(f, l),
        ModelArg::Baseline => baseline_config(f, l),
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Features {
            manifest,
            out_dir,
            features,
        } => cmd_features(cli, manifest, out_dir, features),
        Command::Augment {
            manifest,
            out_dir,
            speed,
            pitch,
            noise,
            snr_min,
            snr_max,
        } => {
            let spec = AugmentSpec {
                speed_factors: speed.clone(),
                pitch_semitones: pitch.clone(),
                noise_kinds: noise.clone(),
                snr_db_range: (*snr_min, *snr_max),
                rng_seed: cli.seed,
            };
            cmd_augment(cli, manifest, out_dir, &spec)
        }
        Command::Train { args } => cmd_train(cli, args),
        Command::GridSearch {
            args,
            layer,
            contexts,
            dilations,
            epochs_per_cell,
        } => {
            let space = GridSearchSpace {
                layer_index: *layer,
                context_sizes: contexts.clone(),
                dilations: dilations.clone(),
                epochs_per_cell: *epochs_per_cell,
            };
            cmd_grid_search(cli, args, &space)
        }
        Command::Eval {
            checkpoint,
            test,
            out_dir,
            features,
        } => cmd_eval(cli, checkpoint, test, out_dir, features),
        Command::Embed {
            checkpoint,
            manifest,
            out,
            features,
        } => cmd_embed(cli, checkpoint, manifest, out, features),
        Command::Ablation {
            train,
            val,
            work_dir,
            epochs,
            batch_size,
            learning_rate,
            chunk_s,
            features,
        } => {
            let tc = TrainConfig {
                epochs: *epochs,
                batch_size: *batch_size,
                optimizer: OptimizerSettings {
                    learning_rate: *learning_rate,
                    ..OptimizerSettings::default()
                },
                seed: cli.seed,
                precision: cli.precision,
                checkpoint_dir: work_dir.clone(),
                chunk_s: *chunk_s,
                pipeline: features.pipeline(),
            };
            cmd_ablation(cli, train, val, work_dir, &tc)
        }
    }
}

fn cmd_features(
    cli: &Cli,
    manifest: &Path,
    out_dir: &Path,
    features: &FeatureArgs,
) -> Result<(), CliError> {
    let m = load_manifest(manifest)?;
    let mut pipe = features.pipeline();
    if std::env::var_os("XLID_CACHE_DIR").is_none() {
        pipe.cache_dir = Some(out_dir.to_path_buf());
    }
    let cache_root = pipe.cache_dir.clone().expect("cache dir set above");
    write_run_manifest(&cache_root, cli)?;
    let mut fresh = 0usize;
    let mut reused = 0usize;
    let mut failures = Vec::new();
    for entry in m.entries() {
        match pipe.extract_and_cache(&entry.path) {
            Ok((_, true)) => reused += 1,
            Ok((_, false)) => fresh += 1,
            Err(e) => failures.push(format!("{}: {e}", entry.path.display())),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        return Err(CliError::Data(format!(
            "{} of {} clips failed feature extraction",
            failures.len(),
            m.len()
        )));
    }
    if !cli.quiet {
        println!(
            "cached {fresh} feature files ({reused} already present) in {}",
            cache_root.display()
        );
    }
    Ok(())
}

fn cmd_augment(
    cli: &Cli,
    manifest: &Path,
    out_dir: &Path,
    spec: &AugmentSpec,
) -> Result<(), CliError> {
    let m = load_manifest(manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_data(out_dir, e))?;
    write_run_manifest(out_dir, cli)?;
    let out = augment_corpus(&m, spec, out_dir)?;
    let manifest_path = out_dir.join("augmented.csv");
    save_manifest(&out, &manifest_path)?;
    if !cli.quiet {
        println!(
            "augmented {} clips into {} outputs; manifest at {}",
            m.len(),
            out.len(),
            manifest_path.display()
        );
    }
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let train_m = load_manifest(&args.train)?;
    // the validation set may not cover every language; keep label indices
    // aligned with the training corpus
    let val_m = load_manifest_with_languages(&args.val, train_m.languages())?;
    let cfg = model_config(args, &train_m)?;
    let tc = train_config(cli, args);
    write_run_manifest(&tc.checkpoint_dir, cli)?;
    let outcome = train(&cfg, &train_m, &val_m, &tc)?;
    let report_path = tc.checkpoint_dir.join("report.json");
    std::fs::write(&report_path, outcome.report.to_json())
        .map_err(|e| io_data(&report_path, e))?;
    let cfg_path = tc.checkpoint_dir.join("model_config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| io_data(&cfg_path, e))?;
    println!(
        "best val accuracy {:.4} at epoch {}; checkpoint {}",
        outcome.report.best_val_accuracy,
        outcome.report.best_epoch.map(|e| e + 1).unwrap_or(0),
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_grid_search(cli: &Cli, args: &TrainArgs, space: &GridSearchSpace) -> Result<(), CliError> {
    let train_m = load_manifest(&args.train)?;
    let val_m = load_manifest(&args.val)?;
    let cfg = model_config(args, &train_m)?;
    let tc = train_config(cli, args);
    write_run_manifest(&tc.checkpoint_dir, cli)?;
    let outcome = grid_search(space, &cfg, &train_m, &val_m, &tc)?;
    let json_path = tc.checkpoint_dir.join("grid_search.json");
    std::fs::write(&json_path, outcome.to_json()).map_err(|e| io_data(&json_path, e))?;
    let table_path = tc.checkpoint_dir.join("grid_search.txt");
    std::fs::write(&table_path, outcome.table_text()).map_err(|e| io_data(&table_path, e))?;
    if !cli.quiet {
        print!("{}", outcome.table_text());
    }
    println!(
        "best cell: context {} dilation {} accuracy {:.4}",
        outcome.best.context,
        outcome.best.dilation,
        outcome.best.val_accuracy.unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: &Path,
    test: &Path,
    out_dir: &Path,
    features: &FeatureArgs,
) -> Result<(), CliError> {
    let test_m = load_manifest(test)?;
    let raw = xlid_core::autodiff::load_checkpoint(checkpoint)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let cfg = ModelConfig::from_json(&raw.config_json)?;
    write_run_manifest(out_dir, cli)?;
    let report = evaluate(
        &cfg,
        checkpoint,
        &test_m,
        &features.pipeline(),
        cli.precision,
        Some(out_dir),
    )?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json()).map_err(|e| io_data(&report_path, e))?;
    if !cli.quiet {
        print!("{}", report.confusion_text());
    }
    println!(
        "accuracy {:.4} over {} clips",
        report.accuracy(),
        report.total_evaluated()
    );
    Ok(())
}

fn cmd_embed(
    cli: &Cli,
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    features: &FeatureArgs,
) -> Result<(), CliError> {
    match cli.precision {
        Precision::F32 => embed_impl::<f32>(cli, checkpoint, manifest, out, features),
        Precision::F64 => embed_impl::<f64>(cli, checkpoint, manifest, out, features),
    }
}

fn embed_impl<S: Scalar>(
    cli: &Cli,
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    features: &FeatureArgs,
) -> Result<(), CliError> {
    let m = load_manifest(manifest)?;
    let net: Network<S> = Network::load(checkpoint)?;
    let pipe = features.pipeline();
    let mut rows = String::new();
    for entry in m.entries() {
        let feat = pipe.features_for(&entry.path)?;
        let emb = net.extract_xvector(&feat.values)?;
        rows.push_str(&entry.path.display().to_string());
        for v in emb {
            rows.push(',');
            rows.push_str(&format!("{v}"));
        }
        rows.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_data(dir, e))?;
        write_run_manifest(dir, cli)?;
    }
    std::fs::write(out, rows).map_err(|e| io_data(out, e))?;
    println!("wrote {} embeddings to {}", m.len(), out.display());
    Ok(())
}

fn cmd_ablation(
    cli: &Cli,
    train: &Path,
    val: &Path,
    work_dir: &Path,
    tc: &TrainConfig,
) -> Result<(), CliError> {
    let train_m = load_manifest(train)?;
    let val_m = load_manifest(val)?;
    write_run_manifest(work_dir, cli)?;
    let spec = AugmentSpec {
        rng_seed: cli.seed,
        ..AugmentSpec::default()
    };
    let report = run_ablation(&train_m, &val_m, work_dir, tc, &spec)?;
    let json_path = work_dir.join("ablation.json");
    std::fs::write(&json_path, report.to_json()).map_err(|e| io_data(&json_path, e))?;
    print!("{}", report.table_text());
    let best = report
        .rows
        .iter()
        .map(|r| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("best accuracy {best:.4}");
    Ok(())
}
