//! The `cocola` command line.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, Level, LevelFilter, Log, Metadata, Record};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_mono, write_wav_f32};
use crate::componet::{
    build_prompt, ddpm_sample, load_componet, parse_tag_list, train_componet, ComponetConfig,
    TaskLabel, TaskPolicy,
};
use crate::dataset::{scan_dataset, validate_manifest, DatasetManifest, Layout, Split, SplitRule};
use crate::encoder::BackboneScale;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_classification, read_pairs, score_report, BatchCount, EvalConfig, ScoreOptions,
    ScoreReport,
};
use crate::sampling::{Rng, SubsetMode};
use crate::synthbench::{generate, SynthSpec};
use crate::training::{load_checkpoint, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cocola",
    version,
    about = "Stem coherence encoder, coherence scoring and a toy compositional diffusion adapter"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a multi-stem dataset directory into a manifest.
    Ingest(IngestArgs),
    /// Generate the synthetic key/tempo-locked benchmark.
    SynthData(SynthArgs),
    /// Train the coherence encoder.
    Train(TrainArgs),
    /// Coherent-pair classification accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Coherence scores for a list of (conditioning, candidate) pairs.
    Score(ScoreArgs),
    /// Train the toy base denoiser and its control adapter.
    ComponetTrain(ComponetTrainArgs),
    /// Sample a clip from a trained toy adapter.
    ComponetGenerate(ComponetGenerateArgs),
    /// Merge score reports and external FAD values into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    FlatStems,
    PerTrackDirs,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Dataset root directory.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_enum, default_value = "per-track-dirs")]
    pub layout: LayoutArg,
    /// Train,validation,test fractions used when the root has no split directories.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split_ratio: String,
    /// Model sample rate recorded in the manifest.
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of tracks (default 250).
    #[arg(long)]
    pub n_tracks: Option<usize>,
    /// Stems per track (default 4).
    #[arg(long)]
    pub stems: Option<usize>,
    /// Track duration in seconds (default 6).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Toy,
    Small,
    Paper,
}

impl From<BackboneArg> for BackboneScale {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Toy => BackboneScale::Toy,
            BackboneArg::Small => BackboneScale::Small,
            BackboneArg::Paper => BackboneScale::Paper,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    SingleStem,
    RandomSubmix,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and logs.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps (default 100000).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Checkpoint period in steps (default 1000).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Adam learning rate (default 0.001).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Windows per batch K (default 32).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Window length in samples (default 80000, 5 s at 16 kHz).
    #[arg(long)]
    pub window_len: Option<usize>,
    /// Maximum overlap ratio r between windows of one track (default 0.5).
    #[arg(long)]
    pub max_overlap: Option<f64>,
    /// Gaussian noise std added to each sub-mix (default 0.001).
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Embedding dimension d (default 512).
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Dropout rate (default 0.1).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Backbone size (default paper).
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// Sub-mix selection (default random-submix).
    #[arg(long, value_enum)]
    pub subset_mode: Option<SubsetArg>,
    /// Standardize mel bins with train-split statistics (default off).
    #[arg(long)]
    pub standardize_features: Option<bool>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Windows per evaluation batch.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of batches, or `full-epoch` for one pass of non-overlapping windows.
    #[arg(long, default_value = "1000")]
    pub n_batches: String,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Window length in samples (default: the checkpoint's training value).
    #[arg(long)]
    pub window_len: Option<usize>,
    /// JSON report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// CSV with header `pair_id,conditioning_path,candidate_path`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Report CSV; a JSON twin is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest whose test split provides ground-truth positive pairs.
    #[arg(long)]
    pub ground_truth_manifest: Option<PathBuf>,
    /// Number of ground-truth pairs.
    #[arg(long, default_value_t = 200)]
    pub ground_truth_n: usize,
    /// Ground-truth window length in samples (default 80000).
    #[arg(long)]
    pub ground_truth_window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub fad_clap: Option<f64>,
    #[arg(long)]
    pub fad_encodec: Option<f64>,
    #[arg(long)]
    pub fad_vggish: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ComponetTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base denoiser steps (default 300).
    #[arg(long)]
    pub base_steps: Option<usize>,
    /// Adapter steps (default 300).
    #[arg(long)]
    pub adapter_steps: Option<usize>,
    /// Adapter learning rate (default 0.0001).
    #[arg(long)]
    pub adapter_lr: Option<f64>,
    /// Train only on accompaniment-generation tasks.
    #[arg(long)]
    pub ag_only: bool,
}

#[derive(Debug, Args)]
pub struct ComponetGenerateArgs {
    /// Directory written by `componet-train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated input tags.
    #[arg(long, default_value = "")]
    pub tags_in: String,
    /// Comma-separated output tags.
    #[arg(long)]
    pub tags_out: String,
    /// Conditioning audio; silence when absent.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Sampling steps (default: the full schedule).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output WAV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `label=report.json`, repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    /// CSV with header `label,fad_clap,fad_encodec,fad_vggish`.
    #[arg(long)]
    pub fad: Option<PathBuf>,
    /// Table CSV; a JSON twin is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

struct RunLogger {
    file: Mutex<Option<File>>,
}

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!(
            "{} {:<5} {}",
            chrono::Local::now().format("%Y-%m-%dT%H:%M:%S"),
            record.level(),
            record.args()
        );
        if let Ok(mut guard) = self.file.lock() {
            if let Some(f) = guard.as_mut() {
                let _ = writeln!(f, "{line}");
            }
        }
        if record.level() <= Level::Warn || std::env::var_os("COCOLA_VERBOSE").is_some() {
            eprintln!("{line}");
        }
    }

    fn flush(&self) {
        if let Ok(mut guard) = self.file.lock() {
            if let Some(f) = guard.as_mut() {
                let _ = f.flush();
            }
        }
    }
}

fn logger() -> &'static RunLogger {
    static LOGGER: OnceLock<RunLogger> = OnceLock::new();
    LOGGER.get_or_init(|| RunLogger {
        file: Mutex::new(None),
    })
}

/// Opens `<dir>/<timestamp>_<subcommand>.log` as the log target of this run.
fn start_log(dir: &Path, name: &str) -> Option<PathBuf> {
    fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!(
        "{}_{name}.log",
        chrono::Local::now().format("%Y%m%dT%H%M%S%.3f")
    ));
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .ok()?;
    *logger().file.lock().ok()? = Some(file);
    Some(path)
}

fn stop_log() {
    logger().flush();
    if let Ok(mut guard) = logger().file.lock() {
        *guard = None;
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Score(_) => "score",
            Command::ComponetTrain(_) => "componet-train",
            Command::ComponetGenerate(_) => "componet-generate",
            Command::Report(_) => "report",
        }
    }

    /// Directory that receives this run's outputs and log; `None` when the
    /// run only prints.
    fn log_dir(&self) -> Option<PathBuf> {
        Some(match self {
            Command::Ingest(a) => parent_dir(&a.out),
            Command::SynthData(a) => a.out.clone(),
            Command::Train(a) => a.out_dir.clone(),
            Command::Eval(a) => parent_dir(a.out.as_ref()?),
            Command::Score(a) => parent_dir(&a.out),
            Command::ComponetTrain(a) => a.out.clone(),
            Command::ComponetGenerate(a) => parent_dir(&a.out),
            Command::Report(a) => parent_dir(&a.out),
        })
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    static INSTALLED: OnceLock<()> = OnceLock::new();
    INSTALLED.get_or_init(|| {
        if log::set_logger(logger()).is_ok() {
            log::set_max_level(LevelFilter::Info);
        }
    });
    let log_path = cli.command.log_dir().and_then(|d| start_log(&d, name));
    info!("cocola {name}");
    let result = dispatch(cli.command);
    let code = match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            let where_ = log_path.as_ref().map_or_else(
                || "log: stderr".to_string(),
                |p| format!("log: {}", p.display()),
            );
            eprintln!("error: {e} ({where_})");
            EXIT_RUNTIME
        }
    };
    stop_log();
    code
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::ComponetTrain(a) => componet_train_cmd(a),
        Command::ComponetGenerate(a) => componet_generate_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad split ratio `{p}`")))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::config(
            "split ratio needs three comma-separated values",
        )),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let [tr, va, te] = parse_ratios(&a.split_ratio)?;
    let layout = match a.layout {
        LayoutArg::FlatStems => Layout::FlatStems,
        LayoutArg::PerTrackDirs => Layout::PerTrackDirs,
    };
    let outcome = scan_dataset(
        &a.root,
        layout,
        SplitRule::ratio(tr, va, te, a.seed)?,
        a.sample_rate,
    )?;
    for s in &outcome.skipped {
        log::warn!("skipped `{}`: {}", s.track_id, s.reason);
    }
    let report = validate_manifest(&outcome.manifest);
    info!(
        "{} tracks: {} ok, {} missing, {} undecodable, {} length mismatches",
        report.total, report.ok, report.missing, report.decode_errors, report.length_mismatches
    );
    outcome.manifest.save(&a.out)?;
    println!(
        "{} tracks written to {}",
        outcome.manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = a.n_tracks {
        spec.n_tracks = v;
    }
    if let Some(v) = a.stems {
        spec.stems_per_track = v;
    }
    if let Some(v) = a.duration {
        spec.duration = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let out = generate(&spec, &a.out)?;
    println!(
        "{} tracks, {} collision groups, chroma check {}",
        out.manifest.entries.len(),
        out.meta.collisions.len(),
        if out.meta.chroma_check.passed {
            "passed"
        } else {
            "failed"
        }
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v.into();
            }
        };
    }
    set!(a.seed, cfg.seed);
    set!(a.max_steps, cfg.max_steps);
    set!(a.eval_every, cfg.eval_every);
    set!(a.learning_rate, cfg.learning_rate);
    set!(a.batch_size, cfg.sampler.batch_size);
    set!(a.window_len, cfg.sampler.window_len);
    set!(a.max_overlap, cfg.sampler.max_overlap);
    set!(a.noise_sigma, cfg.sampler.noise_sigma);
    set!(a.embedding_dim, cfg.encoder.embedding_dim);
    set!(a.dropout, cfg.encoder.dropout_rate);
    set!(a.backbone, cfg.encoder.backbone_scale);
    set!(a.standardize_features, cfg.encoder.standardize_features);
    if let Some(m) = a.subset_mode {
        cfg.sampler.subset_mode = match m {
            SubsetArg::SingleStem => SubsetMode::SingleStem,
            SubsetArg::RandomSubmix => SubsetMode::RandomSubmix,
        };
    }
    cfg.sampler.seed = cfg.seed;
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let cfg_path = a.out_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n")
        .map_err(|e| Error::io(&cfg_path, e))?;
    let out = train(&manifest, &cfg, &a.out_dir)?;
    let last = out.checkpoint.history.last().copied();
    if let Some(m) = last {
        println!(
            "step {} loss {:.4} batch accuracy {:.3}",
            m.step, m.loss, m.batch_accuracy
        );
    }
    println!("checkpoint: {}", out.final_path.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let n_batches = if a.n_batches == "full-epoch" {
        BatchCount::FullEpoch
    } else {
        BatchCount::Batches(a.n_batches.parse().map_err(|_| {
            Error::config(format!(
                "--n-batches must be a count or `full-epoch`, got `{}`",
                a.n_batches
            ))
        })?)
    };
    let mut sampler = ckpt
        .train_config
        .as_ref()
        .map(|c| c.sampler.clone())
        .unwrap_or_default();
    if let Some(w) = a.window_len {
        sampler.window_len = w;
    }
    let cfg = EvalConfig {
        k: a.k,
        n_batches,
        split: a.split.into(),
        seed: a.seed,
    };
    let report = evaluate_classification(&ckpt.encoder, &sampler, &manifest, &cfg)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    info!(
        "accuracy {:.4} over {} batches",
        report.accuracy, report.n_batches
    );
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let pairs = read_pairs(&a.pairs)?;
    let ground_truth = match &a.ground_truth_manifest {
        Some(p) => Some((DatasetManifest::load(p)?, a.ground_truth_n)),
        None => None,
    };
    let opts = ScoreOptions {
        ground_truth,
        ground_truth_window: a.ground_truth_window,
        seed: a.seed,
        fad_clap: a.fad_clap,
        fad_encodec: a.fad_encodec,
        fad_vggish: a.fad_vggish,
    };
    let report = score_report(&ckpt.encoder, &pairs, &opts)?;
    for e in &report.errors {
        log::warn!("pair `{}`: {}", e.pair_id, e.message);
    }
    report.write_csv(&a.out)?;
    report.write_json(&a.out.with_extension("json"))?;
    println!(
        "{} pairs scored, {} errors, mean CCS {:.6}",
        report.rows.len(),
        report.errors.len(),
        report.aggregates.mean
    );
    Ok(())
}

fn componet_train_cmd(a: ComponetTrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => ComponetConfig::load(p)?,
        None => ComponetConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.base_steps {
        cfg.base_steps = v;
    }
    if let Some(v) = a.adapter_steps {
        cfg.adapter_steps = v;
    }
    if let Some(v) = a.adapter_lr {
        cfg.adapter_lr = v;
    }
    if a.ag_only {
        cfg.policy = TaskPolicy::Only([TaskLabel::AG].into());
    }
    let out = train_componet(&manifest, &cfg, &a.out)?;
    println!(
        "base loss {:.4}, adapter loss {:.4}, written to {}",
        out.base_losses.last().copied().unwrap_or(f64::NAN),
        out.adapter_losses.last().copied().unwrap_or(f64::NAN),
        out.dir.display()
    );
    Ok(())
}

fn componet_generate_cmd(a: ComponetGenerateArgs) -> Result<()> {
    let (model, meta) = load_componet(&a.ckpt)?;
    let prompt = build_prompt(
        &parse_tag_list(&a.tags_in),
        &parse_tag_list(&a.tags_out),
        &meta.vocab,
    )?;
    let channels = meta.denoiser.latent_channels;
    let (w, len) = match &a.cond {
        Some(p) => {
            let audio = load_mono(p, meta.sample_rate)?;
            let latent = meta.codec.encode(&audio)?;
            let len = latent.len();
            let data: Vec<f32> = latent.z.iter().copied().collect();
            let t =
                candle_core::Tensor::from_vec(data, (1, channels, len), &candle_core::Device::Cpu)?;
            (Some(t), len)
        }
        None => (None, meta.latent_len),
    };
    let steps = a.steps.unwrap_or(meta.schedule.max_step());
    let mut rng = Rng::seed_from_u64(a.seed);
    let z = ddpm_sample(
        &model,
        std::slice::from_ref(&prompt),
        w.as_ref(),
        (channels, len),
        &meta.schedule,
        steps,
        candle_core::DType::F32,
        &mut rng,
    )?;
    let values: Vec<f32> = z.flatten_all()?.to_vec1::<f32>()?;
    let arr = ndarray::Array2::from_shape_vec((channels, len), values)
        .map_err(|e| Error::shape(e.to_string()))?;
    let audio = meta.codec.decode(&crate::componet::LatentClip::new(arr)?);
    write_wav_f32(&a.out, &audio, meta.sample_rate)?;
    println!("wrote {} samples to {}", audio.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub ccs_mean: f64,
    pub ccs_median: f64,
    pub count: usize,
    pub ground_truth_mean: Option<f64>,
    pub fad_clap: Option<f64>,
    pub fad_encodec: Option<f64>,
    pub fad_vggish: Option<f64>,
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut external: std::collections::HashMap<String, [Option<f64>; 3]> = Default::default();
    if let Some(p) = &a.fad {
        let mut rdr = csv::Reader::from_path(p).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok());
            external.insert(rec[0].trim().to_string(), [num(1), num(2), num(3)]);
        }
    }
    let mut rows = Vec::new();
    for input in &a.inputs {
        let (label, path) = input
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--input expects label=path, got `{input}`")))?;
        let r = ScoreReport::read_json(Path::new(path))?;
        let ext = external.get(label).copied().unwrap_or([None; 3]);
        rows.push(TableRow {
            label: label.to_string(),
            ccs_mean: r.aggregates.mean,
            ccs_median: r.aggregates.median,
            count: r.aggregates.count,
            ground_truth_mean: r.ground_truth_aggregates.map(|g| g.mean),
            fad_clap: ext[0].or(r.fad_clap),
            fad_encodec: ext[1].or(r.fad_encodec),
            fad_vggish: ext[2].or(r.fad_vggish),
        });
    }
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record([
        "label",
        "ccs_mean",
        "ccs_median",
        "count",
        "ground_truth_mean",
        "fad_clap",
        "fad_encodec",
        "fad_vggish",
    ])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            format!("{:.6}", r.ccs_mean),
            format!("{:.6}", r.ccs_median),
            r.count.to_string(),
            opt(r.ground_truth_mean),
            opt(r.fad_clap),
            opt(r.fad_encodec),
            opt(r.fad_vggish),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    let json = a.out.with_extension("json");
    fs::write(&json, serde_json::to_string_pretty(&rows)? + "\n")
        .map_err(|e| Error::io(&json, e))?;
    println!("{} rows written to {}", rows.len(), a.out.display());
    Ok(())
}
