//! Command-line front end.
//!
//! `train` writes a run directory holding `manifest.json` (the fully resolved
//! configuration plus dataset fingerprints), `metrics.jsonl` (one
//! deterministic record per epoch), `timing.jsonl` (wall-clock measurements,
//! kept apart so metrics stay byte-reproducible) and `model.ckpt`.
//!
//! Settings resolve in three layers: built-in defaults, then `--config`
//! (TOML or JSON, or a previous run's `manifest.json`), then flags.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data
//! error.

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Stdout writes that ignore a closed pipe instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

use crate::bake::{build_soft_targets, KnowledgeSource, Propagation};
use crate::data::{load_cifar_binary, load_idx, synth_clusters, ChannelNorm, Dataset};
use crate::error::Error;
use crate::losses::temperature_probs;
use crate::models::{Architecture, Model};
use crate::sampling::epoch_batches;
use crate::trainer::{evaluate, train_with, EpochMetrics, Method, Schedule, TrainConfig};

pub const THREADS_ENV: &str = "BAKE_KIT_THREADS";

const CIFAR_WEIGHT_DECAY: f64 = 5e-4;

/// Where the data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Synth,
    Idx,
    Cifar,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Synth => "synth",
            Source::Idx => "idx",
            Source::Cifar => "cifar",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "synth" => Ok(Source::Synth),
            "idx" => Ok(Source::Idx),
            "cifar" => Ok(Source::Cifar),
            _ => Err(Error::config(format!("unknown dataset `{s}` (synth|idx|cifar)"))),
        }
    }
}

serde_via_str!(Source);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 200,
            dim: 32,
            spread: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarConfig {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// 10 or 100.
    pub classes: usize,
    /// `None` keeps pixels in [0, 1].
    pub normalize: Option<ChannelNorm>,
}

impl Default for CifarConfig {
    fn default() -> Self {
        CifarConfig {
            train: Vec::new(),
            test: Vec::new(),
            classes: 100,
            normalize: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    pub synth: SynthConfig,
    pub idx: IdxConfig,
    pub cifar: CifarConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Synth,
            synth: SynthConfig::default(),
            idx: IdxConfig::default(),
            cifar: CifarConfig::default(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, batch sampling and augmentation.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Copies the run seed into every seeded component.
    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.train.sampler.seed = self.seed;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_examples: usize,
    pub test_examples: usize,
    pub num_classes: usize,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub architecture: Architecture,
    pub dataset: DatasetSummary,
}

/// The deterministic part of [`EpochMetrics`], one line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub test_top1: f64,
    pub test_top5: f64,
}

impl From<&EpochMetrics> for MetricsRecord {
    fn from(m: &EpochMetrics) -> Self {
        MetricsRecord {
            epoch: m.epoch,
            lr: m.lr,
            train_loss: m.train_loss,
            train_ce: m.train_ce,
            train_kl: m.train_kl,
            test_top1: m.test_top1,
            test_top5: m.test_top5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub wall_seconds: f64,
    pub mean_iter_seconds: f64,
}

#[derive(Parser, Debug)]
#[command(name = "bake-kit", version, about = "Batch knowledge ensembling self-distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model; writes manifest.json, metrics.jsonl, timing.jsonl and model.ckpt
    Train(TrainArgs),
    /// Train several methods over several seeds; writes summary.tsv
    Compare(CompareArgs),
    /// Print the soft targets a checkpoint builds for one batch
    Targets(TargetsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory
    #[arg(long, default_value = "bake-run")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Methods separated by `;`, each `name[:key=value,...]`, e.g.
    /// `vanilla;bake;bake:omega=0.1,m=0`. Keys: omega tau lambda m n_hat mode
    /// knowledge epsilon lr epochs
    #[arg(long, default_value = "vanilla;bake")]
    methods: String,
    /// Number of seeds per method, counting up from --seed
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Output directory; one run directory per (method, seed) cell
    #[arg(long, default_value = "bake-compare")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TargetsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to draw the batch from (train|test)
    #[arg(long, default_value = "test")]
    split: String,
    /// Print at most this many rows [default: the whole batch]
    #[arg(long)]
    rows: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML or JSON config file, or a previous run's manifest.json
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla | label-smoothing | bake [default: bake]
    #[arg(long)]
    method: Option<Method>,
    /// Ensembling weight ω in [0,1] [default: 0.5]
    #[arg(long)]
    omega: Option<f64>,
    /// Softmax temperature τ for targets and distillation [default: 4]
    #[arg(long)]
    tau: Option<f64>,
    /// Distillation weight λ [default: 1]
    #[arg(long)]
    lambda: Option<f64>,
    /// Same-class companions per anchor; forced to 0 for vanilla and label smoothing [default: 1]
    #[arg(long)]
    m: Option<usize>,
    /// Anchors per batch [default: 32]
    #[arg(long)]
    n_hat: Option<usize>,
    /// Propagation: closed | iterate:<t> | one-step [default: closed]
    #[arg(long)]
    mode: Option<Propagation>,
    /// Knowledge propagated: pred | onehot [default: pred]
    #[arg(long)]
    knowledge: Option<KnowledgeSource>,
    /// Label-smoothing ε [default: 0.1]
    #[arg(long)]
    epsilon: Option<f64>,
    /// synth | idx | cifar [default: synth]
    #[arg(long)]
    dataset: Option<Source>,
    /// Synthetic classes [default: 10]
    #[arg(long)]
    synth_classes: Option<usize>,
    /// Synthetic examples per class, per split [default: 200]
    #[arg(long)]
    synth_per_class: Option<usize>,
    /// Synthetic input dimension [default: 32]
    #[arg(long)]
    synth_dim: Option<usize>,
    /// Synthetic within-class standard deviation [default: 2]
    #[arg(long)]
    synth_spread: Option<f64>,
    /// Seed of the synthetic generator [default: 0]
    #[arg(long)]
    data_seed: Option<u64>,
    /// IDX training images
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// IDX training labels
    #[arg(long)]
    train_labels: Option<PathBuf>,
    /// IDX test images
    #[arg(long)]
    test_images: Option<PathBuf>,
    /// IDX test labels
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// CIFAR training batch file (repeatable)
    #[arg(long)]
    cifar_train: Vec<PathBuf>,
    /// CIFAR test batch file (repeatable)
    #[arg(long)]
    cifar_test: Vec<PathBuf>,
    /// CIFAR variant, 10 or 100 [default: 100]
    #[arg(long)]
    cifar_classes: Option<usize>,
    /// CIFAR per-channel mean `r,g,b` on the [0,1] scale; needs --cifar-std [default: none]
    #[arg(long)]
    cifar_mean: Option<String>,
    /// CIFAR per-channel std `r,g,b`; needs --cifar-mean [default: none]
    #[arg(long)]
    cifar_std: Option<String>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay [default: 0; 0.0005 for cifar]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// cosine:<warmup epochs> | step:<m1,m2,...>:<factor> [default: cosine:1]
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Seeds model initialization, batch sampling and augmentation [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Random horizontal flips of image inputs [default: off]
    #[arg(long)]
    flip: bool,
}

/// A failed command: exit code plus a one-line message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn write(path: &Path, e: impl fmt::Display) -> Self {
        Failure::runtime(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::DegenerateBatch { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                out!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Targets(a) => cmd_targets(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            let line = f.message.replace('\n', " ");
            eprintln!("error: {line}");
            f.code
        }
    }
}

/// The `--help` text of a subcommand, for documentation checks.
pub fn subcommand_help(name: &str) -> Option<String> {
    let mut cmd = Cli::command();
    cmd.build();
    cmd.find_subcommand_mut(name).map(|c| c.render_help().to_string())
}

fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: &dyn fmt::Display| Failure::config(format!("invalid config {}: {e}", path.display()));
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        let table: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
        serde_json::to_value(table).map_err(|e| bad(&e))?
    } else {
        serde_json::from_str(&text).map_err(|e| bad(&e))?
    };
    // a previous run's manifest carries the configuration under `config`
    match value {
        Value::Object(mut map) if map.contains_key("tool") && map.contains_key("config") => {
            Ok(map.remove("config").expect("checked"))
        }
        v @ Value::Object(_) => Ok(v),
        _ => Err(Failure::config(format!("config {} must be a table/object", path.display()))),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_triple(flag: &str, s: &str) -> CliResult<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Failure::config(format!("{flag}: {e}")))?;
    if v.len() != 3 {
        return Err(Failure::config(format!("{flag} needs three comma-separated values")));
    }
    Ok(v)
}

/// Defaults, then config file, then flags.
fn resolve(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut file_sets_weight_decay = false;
    if let Some(path) = &args.config {
        let file = read_config_file(path)?;
        file_sets_weight_decay = file.pointer("/train/weight_decay").is_some();
        merge(&mut value, file);
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Failure::config(format!("invalid configuration: {e}")))?;

    let t = &mut cfg.train;
    macro_rules! set {
        ($flag:expr => $($target:expr),+) => {
            if let Some(v) = $flag.clone() {
                $($target = v;)+
            }
        };
    }
    set!(args.method => t.method);
    set!(args.omega => t.bake.omega);
    set!(args.tau => t.bake.tau, t.loss.tau);
    set!(args.lambda => t.loss.lambda);
    set!(args.m => t.sampler.m);
    set!(args.n_hat => t.sampler.n_hat);
    set!(args.mode => t.bake.propagation);
    set!(args.knowledge => t.bake.knowledge);
    set!(args.epsilon => t.loss.smoothing_epsilon);
    set!(args.epochs => t.epochs);
    set!(args.lr => t.base_lr);
    set!(args.momentum => t.momentum);
    set!(args.weight_decay => t.weight_decay);
    set!(args.schedule => t.schedule);
    if args.flip {
        t.augment_flip = true;
    }
    set!(args.seed => cfg.seed);

    let d = &mut cfg.data;
    set!(args.dataset => d.source);
    set!(args.synth_classes => d.synth.classes);
    set!(args.synth_per_class => d.synth.per_class);
    set!(args.synth_dim => d.synth.dim);
    set!(args.synth_spread => d.synth.spread);
    set!(args.data_seed => d.synth.seed);
    for (flag, slot) in [
        (&args.train_images, &mut d.idx.train_images),
        (&args.train_labels, &mut d.idx.train_labels),
        (&args.test_images, &mut d.idx.test_images),
        (&args.test_labels, &mut d.idx.test_labels),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if !args.cifar_train.is_empty() {
        d.cifar.train.clone_from(&args.cifar_train);
    }
    if !args.cifar_test.is_empty() {
        d.cifar.test.clone_from(&args.cifar_test);
    }
    set!(args.cifar_classes => d.cifar.classes);
    match (&args.cifar_mean, &args.cifar_std) {
        (Some(m), Some(s)) => {
            d.cifar.normalize = Some(ChannelNorm {
                mean: parse_triple("--cifar-mean", m)?,
                std: parse_triple("--cifar-std", s)?,
            })
        }
        (None, None) => {}
        _ => return Err(Failure::config("--cifar-mean and --cifar-std must be given together")),
    }

    if d.source == Source::Cifar && args.weight_decay.is_none() && !file_sets_weight_decay {
        cfg.train.weight_decay = CIFAR_WEIGHT_DECAY;
    }
    cfg.propagate_seed();
    cfg.train.validate()?;
    Ok(cfg)
}

fn require(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone()
        .ok_or_else(|| Failure::config(format!("the idx dataset needs {flag}")))
}

pub fn load_data(cfg: &DataConfig) -> crate::Result<(Dataset, Dataset)> {
    match cfg.source {
        Source::Synth => {
            let s = &cfg.synth;
            synth_clusters(s.classes, s.per_class, s.dim, s.spread, s.seed)
        }
        Source::Idx => unreachable!("idx paths are checked by the caller"),
        Source::Cifar => {
            let c = &cfg.cifar;
            if c.train.is_empty() || c.test.is_empty() {
                return Err(Error::config("the cifar dataset needs --cifar-train and --cifar-test"));
            }
            let train = load_cifar_binary(&c.train, c.classes, c.normalize.as_ref())?;
            let test = load_cifar_binary(&c.test, c.classes, c.normalize.as_ref())?;
            Ok((train, test))
        }
    }
}

fn load_datasets(cfg: &DataConfig) -> CliResult<(Dataset, Dataset)> {
    if cfg.source == Source::Idx {
        let i = &cfg.idx;
        let train = load_idx(
            &require(&i.train_images, "--train-images")?,
            &require(&i.train_labels, "--train-labels")?,
        )?;
        let test = load_idx(
            &require(&i.test_images, "--test-images")?,
            &require(&i.test_labels, "--test-labels")?,
        )?;
        return Ok((train, test));
    }
    Ok(load_data(cfg)?)
}

/// The model a dataset gets: the conv stem for images, the MLP otherwise.
pub fn architecture_for(source: Source, train: &Dataset) -> Architecture {
    match (source, train.image) {
        (Source::Cifar, Some(shape)) => {
            Architecture::small_conv(shape.channels, shape.height, shape.width, train.num_classes())
        }
        _ => Architecture::mlp(train.input_dim(), train.num_classes()),
    }
}

pub fn manifest_for(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> RunManifest {
    RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        architecture: architecture_for(cfg.data.source, train),
        dataset: DatasetSummary {
            train_examples: train.len(),
            test_examples: test.len(),
            num_classes: train.num_classes(),
            train_fingerprint: train.fingerprint(),
            test_fingerprint: test.fingerprint(),
        },
    }
}

struct Outcome {
    top1: f64,
    top5: f64,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::write(path, e))
}

fn write_line<T: Serialize>(out: &mut BufWriter<File>, path: &Path, record: &T) -> CliResult<()> {
    let line = serde_json::to_string(record).map_err(|e| Failure::write(path, e))?;
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| Failure::write(path, e))
}

/// Trains one configuration and fills `out_dir`.
fn run_training(cfg: &RunConfig, train: &Dataset, test: &Dataset, out_dir: &Path, verbose: bool) -> CliResult<Outcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Failure::write(out_dir, e))?;
    let manifest = manifest_for(cfg, train, test);
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::write(&manifest_path, e))?;
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Failure::write(&manifest_path, e))?;

    let model = Model::init(manifest.architecture.clone(), cfg.seed)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let timing_path = out_dir.join("timing.jsonl");
    let mut metrics_out = create(&metrics_path)?;
    let mut timing_out = create(&timing_path)?;
    let mut write_error = None;
    let epochs = cfg.train.epochs;
    let (model, _) = train_with(model, train, test, &cfg.train, |m| {
        if write_error.is_some() {
            return;
        }
        let timing = TimingRecord {
            epoch: m.epoch,
            wall_seconds: m.wall_seconds,
            mean_iter_seconds: m.mean_iter_seconds,
        };
        let written = write_line(&mut metrics_out, &metrics_path, &MetricsRecord::from(m))
            .and_then(|_| write_line(&mut timing_out, &timing_path, &timing));
        if let Err(e) = written {
            write_error = Some(e);
        } else if verbose {
            outln!(
                "epoch {}/{epochs}  loss {:.4}  ce {:.4}  kl {:.4}  top1 {:.4}  top5 {:.4}  {:.2}s",
                m.epoch + 1,
                m.train_loss,
                m.train_ce,
                m.train_kl,
                m.test_top1,
                m.test_top5,
                m.wall_seconds
            );
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let ckpt = out_dir.join("model.ckpt");
    model.save(&ckpt).map_err(|e| Failure::write(&ckpt, e))?;
    let (top1, top5) = evaluate(&model, test)?;
    Ok(Outcome { top1, top5 })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg = resolve(&args.common)?;
    let (train, test) = load_datasets(&cfg.data)?;
    let outcome = run_training(&cfg, &train, &test, &args.out_dir, true)?;
    outln!(
        "final top1 {:.4}  top5 {:.4}  -> {}",
        outcome.top1,
        outcome.top5,
        args.out_dir.display()
    );
    Ok(())
}

/// One entry of `--methods`, applied on top of the shared configuration.
pub fn apply_method_spec(spec: &str, base: &RunConfig) -> crate::Result<RunConfig> {
    let mut cfg = base.clone();
    let (name, params) = match spec.split_once(':') {
        Some((n, p)) => (n, Some(p)),
        None => (spec, None),
    };
    cfg.train.method = name.trim().parse()?;
    let t = &mut cfg.train;
    for pair in params.into_iter().flat_map(|p| p.split(',')).filter(|p| !p.trim().is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("method parameter `{pair}` is not key=value")))?;
        let value = value.trim();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::config(format!("`{key}` needs a number, got `{v}`")))
        };
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("`{key}` needs a non-negative integer, got `{v}`")))
        };
        match key.trim() {
            "omega" => t.bake.omega = num(value)?,
            "tau" => {
                t.bake.tau = num(value)?;
                t.loss.tau = t.bake.tau;
            }
            "lambda" => t.loss.lambda = num(value)?,
            "m" => t.sampler.m = int(value)?,
            "n_hat" => t.sampler.n_hat = int(value)?,
            "mode" => t.bake.propagation = value.parse()?,
            "knowledge" => t.bake.knowledge = value.parse()?,
            "epsilon" => t.loss.smoothing_epsilon = num(value)?,
            "lr" => t.base_lr = num(value)?,
            "epochs" => t.epochs = int(value)?,
            other => return Err(Error::config(format!("unknown method parameter `{other}`"))),
        }
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_compare(args: CompareArgs) -> CliResult<()> {
    let base = resolve(&args.common)?;
    let specs: Vec<&str> = args.methods.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
    if specs.is_empty() {
        return Err(Failure::config("--methods lists no methods"));
    }
    if args.seeds == 0 {
        return Err(Failure::config("--seeds must be at least 1"));
    }
    let threads = thread_cap()?;
    let mut cells = Vec::new();
    for (row, spec) in specs.iter().enumerate() {
        let method_cfg = apply_method_spec(spec, &base)?;
        for s in 0..args.seeds {
            let mut cfg = method_cfg.clone();
            cfg.seed = base.seed + s;
            cfg.propagate_seed();
            let dir = args
                .out_dir
                .join(format!("{row:02}-{}", dir_name(spec)))
                .join(format!("seed-{}", cfg.seed));
            cells.push((row, cfg, dir));
        }
    }
    let (train, test) = load_datasets(&base.data)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<Outcome>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((row, cfg, dir)) = cells.get(i) else { break };
                let outcome = run_training(cfg, &train, &test, dir, false);
                if let Ok(o) = &outcome {
                    outln!("{}  seed {}  top1 {:.4}  top5 {:.4}", specs[*row], cfg.seed, o.top1, o.top5);
                }
                results.lock().expect("no panics while holding the lock")[i] = Some(outcome);
            });
        }
    });

    let mut per_row: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
    for ((row, _, _), result) in cells.iter().zip(results.into_inner().expect("threads joined")) {
        per_row[*row].push(result.expect("every cell ran")?.top1);
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::write(&args.out_dir, e))?;
    let path = args.out_dir.join("summary.tsv");
    let mut table = String::from("method\tseeds\ttop1_mean\ttop1_std\ttop1_pct\n");
    for (spec, accs) in specs.iter().zip(&per_row) {
        let (mean, std) = mean_std(accs);
        table.push_str(&format!(
            "{spec}\t{}\t{mean:.6}\t{std:.6}\t{:.2}±{:.2}\n",
            accs.len(),
            100.0 * mean,
            100.0 * std
        ));
    }
    std::fs::write(&path, &table).map_err(|e| Failure::write(&path, e))?;
    out!("{table}");
    Ok(())
}

/// The `k` largest entries as `(class, value)`, ties to the lower class.
pub fn top_k(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|c| (c, row[c])).collect()
}

fn format_top(row: &[f64]) -> String {
    top_k(row, 3)
        .iter()
        .map(|(c, p)| format!("{c}:{p:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_targets(args: TargetsArgs) -> CliResult<()> {
    let cfg = resolve(&args.common)?;
    let model = Model::load(&args.checkpoint)?;
    let (train, test) = load_datasets(&cfg.data)?;
    let ds = match args.split.as_str() {
        "train" => &train,
        "test" => &test,
        other => return Err(Failure::config(format!("unknown split `{other}` (train|test)"))),
    };
    let arch = model.architecture();
    if arch.input_dim != ds.input_dim() || arch.num_classes != ds.num_classes() {
        return Err(Failure::config(format!(
            "checkpoint expects {} inputs and {} classes but the dataset has {} and {}",
            arch.input_dim,
            arch.num_classes,
            ds.input_dim(),
            ds.num_classes()
        )));
    }
    let sampler = cfg.train.sampler;
    let Some(ids) = epoch_batches(ds.class_index(), &sampler, 0).into_iter().next() else {
        return Err(Failure::config(format!(
            "the {} split has fewer than {} examples",
            args.split, sampler.n_hat
        )));
    };
    let (x, labels) = ds.batch(&ids);
    let (features, logits) = model.forward(&x)?;
    let bake = &cfg.train.bake;
    let q = build_soft_targets(&features, &logits, Some(&labels), bake)?;
    let p = temperature_probs(&logits, bake.tau)?;
    outln!(
        "# omega={} tau={} mode={} knowledge={} batch={}",
        bake.omega,
        bake.tau,
        bake.propagation,
        bake.knowledge,
        ids.len()
    );
    outln!("row\tlabel\ttarget_top3\tprediction_top3");
    let rows = args.rows.unwrap_or(labels.len()).min(labels.len());
    for (r, label) in labels.iter().enumerate().take(rows) {
        outln!(
            "{r}\t{label}\t{}\t{}",
            format_top(q.as_tensor().row(r)),
            format_top(p.row(r))
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> CommonArgs {
        let mut full = vec!["bake-kit", "train"];
        full.extend_from_slice(args);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Train(t) => t.common,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_resolve() {
        let cfg = resolve(&CommonArgs::default()).unwrap();
        assert_eq!(cfg, {
            let mut d = RunConfig::default();
            d.propagate_seed();
            d
        });
        assert_eq!(cfg.train.bake.omega, 0.5);
        assert_eq!(cfg.train.loss.tau, 4.0);
        assert_eq!(cfg.train.loss.lambda, 1.0);
        assert_eq!(cfg.train.sampler.m, 1);
    }

    #[test]
    fn help_lists_every_default() {
        let help = subcommand_help("train").unwrap();
        let d = RunConfig::default();
        let t = &d.train;
        for (flag, default) in [
            ("--method", t.method.to_string()),
            ("--omega", t.bake.omega.to_string()),
            ("--tau", t.bake.tau.to_string()),
            ("--lambda", t.loss.lambda.to_string()),
            ("--m", t.sampler.m.to_string()),
            ("--n-hat", t.sampler.n_hat.to_string()),
            ("--mode", t.bake.propagation.to_string()),
            ("--knowledge", t.bake.knowledge.to_string()),
            ("--epsilon", t.loss.smoothing_epsilon.to_string()),
            ("--dataset", d.data.source.to_string()),
            ("--synth-classes", d.data.synth.classes.to_string()),
            ("--synth-per-class", d.data.synth.per_class.to_string()),
            ("--synth-dim", d.data.synth.dim.to_string()),
            ("--synth-spread", d.data.synth.spread.to_string()),
            ("--data-seed", d.data.synth.seed.to_string()),
            ("--cifar-classes", d.data.cifar.classes.to_string()),
            ("--epochs", t.epochs.to_string()),
            ("--lr", t.base_lr.to_string()),
            ("--momentum", t.momentum.to_string()),
            ("--weight-decay", t.weight_decay.to_string()),
            ("--schedule", t.schedule.to_string()),
            ("--seed", d.seed.to_string()),
        ] {
            let lines: Vec<&str> = help.lines().map(str::trim).collect();
            let start = lines
                .iter()
                .position(|l| l.starts_with(&format!("{flag} ")))
                .unwrap_or_else(|| panic!("{flag} missing from help"));
            let block = lines[start + 1..]
                .iter()
                .take_while(|l| !l.starts_with('-'))
                .copied()
                .collect::<Vec<_>>()
                .join(" ");
            assert!(
                block.contains(&format!("[default: {default}")),
                "{flag} help does not show default {default}: {block}"
            );
        }
    }

    #[test]
    fn flags_override_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seed = 7\n[train]\nepochs = 3\nschedule = \"step:2:0.5\"\n[train.bake]\nomega = 0.9\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&parse(&["--config", p, "--omega", "0.2"])).unwrap();
        assert_eq!(cfg.train.bake.omega, 0.2);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.sampler.seed, 7);
        assert_eq!(cfg.train.schedule, Schedule::Step { milestones: vec![2], factor: 0.5 });
        assert_eq!(cfg.train.loss.lambda, 1.0);
    }

    #[test]
    fn manifest_is_accepted_as_config() {
        let cfg = resolve(&parse(&["--epochs", "2", "--seed", "3", "--method", "label-smoothing"])).unwrap();
        let (train, test) = load_data(&cfg.data).unwrap();
        let manifest = manifest_for(&cfg, &train, &test);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let back = resolve(&parse(&["--config", path.to_str().unwrap()])).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"omgea": 0.3}}"#).unwrap();
        let err = resolve(&parse(&["--config", path.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn cifar_gets_its_own_weight_decay() {
        let cfg = resolve(&parse(&["--dataset", "cifar"])).unwrap();
        assert_eq!(cfg.train.weight_decay, CIFAR_WEIGHT_DECAY);
        let cfg = resolve(&parse(&["--dataset", "cifar", "--weight-decay", "0"])).unwrap();
        assert_eq!(cfg.train.weight_decay, 0.0);
    }

    #[test]
    fn invalid_omega_is_a_config_error() {
        let err = resolve(&parse(&["--omega", "1.5"])).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("[0,1]"), "{}", err.message);
    }

    #[test]
    fn method_specs() {
        let base = RunConfig::default();
        let c = apply_method_spec("bake:omega=0.1,m=0,mode=iterate:3", &base).unwrap();
        assert_eq!(c.train.bake.omega, 0.1);
        assert_eq!(c.train.sampler.m, 0);
        assert_eq!(c.train.bake.propagation, Propagation::Iterate(3));
        assert_eq!(apply_method_spec("vanilla", &base).unwrap().train.method, Method::Vanilla);
        assert!(apply_method_spec("bake:omega", &base).is_err());
        assert!(apply_method_spec("bake:speed=2", &base).is_err());
        assert!(apply_method_spec("bake:omega=2", &base).is_err());
        assert!(apply_method_spec("distill", &base).is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        assert_eq!(top_k(&[0.2, 0.5, 0.2, 0.1], 3), vec![(1, 0.5), (0, 0.2), (2, 0.2)]);
    }
}
