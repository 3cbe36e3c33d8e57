//! The `masklab` command line: `train-base`, `discover`, `eval`, `stats`, `viz`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{self, DiscoveryConfig, DiscoveryError, EvalMetrics, EvalMode};
use crate::masking::{Granularity, Strategy};
use crate::model::{Model, ModelConfig, ModelError, ModelLayout, TransformerConfig};
use crate::subnetwork::{self, SubnetError, Subnetwork};
use crate::tasks::{self, TaskDataset, TaskError, TaskKind};
use crate::training::{self, BaseTrainConfig, TrainError};
use crate::viz::{self, VizError, VizSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Config {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Subnet(#[from] SubnetError),
    #[error(transparent)]
    Viz(#[from] VizError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub modulus: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            modulus: 11,
            split_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Every field is optional in the file; missing ones take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub task: TaskParams,
    pub base_training: BaseTrainConfig,
    pub discovery: DiscoveryConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|source| CliError::Config {
            path: path.display().to_string(),
            source,
        })
    }

    /// Applies the shared `--seed` to every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.base_training.seed = seed;
        self.discovery.seed = seed;
    }

    pub fn datasets(&self) -> Result<(TaskDataset, TaskDataset)> {
        Ok(tasks::generate(
            self.task.modulus,
            self.task.seed,
            self.task.split_fraction,
        )?)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "masklab",
    version,
    about = "Subnetwork discovery and analysis in small frozen networks"
)]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base transformer on both arithmetic tasks.
    TrainBase(TrainBaseArgs),
    /// Find a subnetwork for one task in a trained model.
    Discover(DiscoverArgs),
    /// Accuracy and loss of a model, optionally under a mask ablation.
    Eval(EvalArgs),
    /// Overlap statistics of two subnetworks.
    Stats(StatsArgs),
    /// Draw one or two subnetworks as SVG.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// RunConfig JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (model init, batches, data split, gates).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic modulus.
    #[arg(long)]
    pub modulus: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint manifest path; weights go next to it with a `.bin` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON path [default: <out>.metrics.json].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Maximum epochs; training stops early once it fits the data.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Trained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// add or mul.
    #[arg(long)]
    pub task: TaskKind,
    /// Output `.subnet.json`; the training curve is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// hard_concrete, continuous_sparsification or magnitude.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// weight or neuron.
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    /// Passes over the task data; ignored by magnitude pruning.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate of the mask parameters.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the normalized L0 penalty.
    #[arg(long)]
    pub l0_lambda: Option<f64>,
    /// Fraction of entries magnitude pruning removes per layer.
    #[arg(long)]
    pub prune_fraction: Option<f64>,
    /// Train a linear probe head jointly with the mask.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Subnetwork file; required by subnet and complement modes.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// full, subnet or complement.
    #[arg(long, default_value = "full")]
    pub mode: EvalMode,
    /// add or mul; both tasks when omitted.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// First subnetwork.
    #[arg(long)]
    pub a: PathBuf,
    /// Second subnetwork.
    #[arg(long)]
    pub b: PathBuf,
    /// Model checkpoint; enables per-head rows and the fingerprint check.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    pub json: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// First subnetwork.
    #[arg(long)]
    pub a: PathBuf,
    /// Optional second subnetwork; colors cells by overlap.
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Model checkpoint the masks belong to.
    #[arg(long)]
    pub model: PathBuf,
    /// Grid figure; the sidecar goes to `<out>.json` and, with two masks,
    /// the summary chart to `<out>.summary.svg`.
    #[arg(long)]
    pub out: PathBuf,
    /// Side of one grid cell in SVG units.
    #[arg(long, default_value_t = 4.0)]
    pub cell_size: f64,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown strategy `{s}`"))
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown granularity `{s}`"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// `path` with `suffix` in place of its extension chain after the stem.
fn sibling(path: &Path, strip: &str, suffix: &str) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let stem = name
        .strip_suffix(strip)
        .unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or(name));
    path.with_file_name(format!("{stem}{suffix}"))
}

macro_rules! set_flag {
    ($flag:expr, $target:expr, $name:literal) => {
        if let Some(v) = $flag {
            info!("flag --{} = {:?} overrides config value {:?}", $name, v, $target);
            $target = v.into();
        }
    };
}

fn run_config(common: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            info!("config file {}", p.display());
            RunConfig::load(p)?
        }
        None => {
            info!("no config file; using defaults");
            RunConfig::default()
        }
    };
    if let Some(seed) = common.seed {
        info!("flag --seed = {seed} overrides every config seed");
        cfg.set_seed(seed);
    }
    set_flag!(common.modulus, cfg.task.modulus, "modulus");
    let vocab = cfg.task.modulus + 4;
    if cfg.model.vocab_size != vocab {
        info!("model.vocab_size set to {vocab} for modulus {}", cfg.task.modulus);
        cfg.model.vocab_size = vocab;
    }
    if cfg.model.max_seq_len < tasks::SEQ_LEN {
        return Err(CliError::Usage(format!(
            "model.max_seq_len must be at least {}",
            tasks::SEQ_LEN
        )));
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct SplitMetrics {
    add: EvalMetrics,
    mul: EvalMetrics,
    all: EvalMetrics,
}

fn split_metrics(model: &Model, data: &TaskDataset) -> Result<SplitMetrics> {
    let eval = |d: &TaskDataset| discovery::evaluate(model, None, d, EvalMode::Full);
    Ok(SplitMetrics {
        add: eval(&data.filter_task(TaskKind::Add))?,
        mul: eval(&data.filter_task(TaskKind::Mul))?,
        all: eval(data)?,
    })
}

#[derive(Debug, Serialize)]
struct BaseMetrics {
    fingerprint: String,
    epochs_run: usize,
    final_train_loss: f64,
    train: SplitMetrics,
    test: SplitMetrics,
}

pub fn cmd_train_base(args: &TrainBaseArgs) -> Result<()> {
    let mut cfg = run_config(&args.common)?;
    set_flag!(args.epochs, cfg.base_training.epochs, "epochs");
    set_flag!(args.lr, cfg.base_training.learning_rate, "lr");
    let (train, test) = cfg.datasets()?;
    info!("dataset: {} train / {} test examples", train.len(), test.len());
    let mut model = Model::build(ModelConfig::Transformer(cfg.model.clone()), cfg.base_training.seed)?;
    let history = match training::train_base(&mut model, &train, &cfg.base_training) {
        Ok(h) => h,
        Err(TrainError::NonFinite {
            epoch,
            step,
            loss,
            last_good,
        }) => {
            last_good.save(&args.out)?;
            warn!("wrote last finite checkpoint to {}", args.out.display());
            return Err(TrainError::NonFinite {
                epoch,
                step,
                loss,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    model.save(&args.out)?;
    let metrics = BaseMetrics {
        fingerprint: format!("{:016x}", model.fingerprint()),
        epochs_run: history.epochs_run,
        final_train_loss: history.final_loss,
        train: split_metrics(&model, &train)?,
        test: split_metrics(&model, &test)?,
    };
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| sibling(&args.out, ".json", ".metrics.json"));
    write(&metrics_path, &to_json(&metrics))?;
    info!(
        "trained {} epochs: train acc {:.4}, test acc {:.4} -> {}",
        history.epochs_run,
        metrics.train.all.accuracy,
        metrics.test.all.accuracy,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_discover(args: &DiscoverArgs) -> Result<()> {
    let mut cfg = run_config(&args.common)?;
    let d = &mut cfg.discovery;
    d.task = Some(args.task);
    set_flag!(args.strategy, d.mask.strategy, "strategy");
    set_flag!(args.granularity, d.mask.granularity, "granularity");
    set_flag!(args.epochs, d.epochs, "epochs");
    set_flag!(args.lr, d.learning_rate, "lr");
    set_flag!(args.l0_lambda, d.mask.l0_lambda, "l0-lambda");
    if let Some(f) = args.prune_fraction {
        info!("flag --prune-fraction = {f}");
        d.mask.prune_fraction = Some(f);
    }
    if args.probe {
        d.probe_mode = true;
    }
    let magnitude = d.mask.strategy == Strategy::Magnitude;
    if d.mask.prune_fraction.is_some() && !magnitude {
        return Err(CliError::Usage(format!(
            "prune_fraction only applies to the magnitude strategy, not {}",
            d.mask.strategy.name()
        )));
    }
    if magnitude && !d.probe_mode {
        info!(
            "magnitude pruning is not iterative; epochs ({}) and lr are ignored",
            d.epochs
        );
    }

    let mut model = Model::load(&args.model)?;
    model.freeze();
    let (train, _) = cfg.datasets()?;
    let result = match (cfg.discovery.probe_mode, magnitude) {
        (true, _) => discovery::probe_discover(&model, &train, &cfg.discovery)?,
        (false, true) => discovery::baseline_discover(&model, &train, &cfg.discovery)?,
        (false, false) => discovery::discover(&model, &train, &cfg.discovery)?,
    };
    result.subnetwork.validate_for(&model)?;
    result.subnetwork.save(&args.out)?;
    let curve = sibling(&args.out, ".subnet.json", ".curve.csv");
    write(&curve, &result.curve_csv())?;
    let metrics = sibling(&args.out, ".subnet.json", ".metrics.json");
    write(&metrics, &to_json(&result.metrics))?;
    info!(
        "{} subnetwork: accuracy {:.4} of full {:.4}, kept {}/{} -> {}",
        args.task,
        result.metrics.subnet_accuracy,
        result.metrics.full_accuracy,
        result.metrics.kept,
        result.metrics.total,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    mode: EvalMode,
    task: String,
    split: Split,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let model = Model::load(&args.model)?;
    let mask = match (&args.mask, args.mode) {
        (Some(p), _) => Some(Subnetwork::load(p)?),
        (None, EvalMode::Full) => None,
        (None, mode) => {
            return Err(CliError::Usage(format!("--mask is required for {mode:?} mode")));
        }
    };
    let (train, test) = cfg.datasets()?;
    let data = match args.split {
        Split::Train => train,
        Split::Test => test,
    }
    .select(args.task);
    let metrics = discovery::evaluate(&model, mask.as_ref(), &data, args.mode)?;
    let out = EvalOutput {
        mode: args.mode,
        task: args.task.map_or_else(|| "all".into(), |t| t.to_string()),
        split: args.split,
        metrics,
    };
    println!(
        "{:?} {} {:?}: accuracy {:.6} loss {:.6} ({} examples)",
        out.mode, out.task, out.split, metrics.accuracy, metrics.loss, metrics.examples
    );
    if let Some(p) = &args.out {
        write(p, &to_json(&out))?;
    }
    Ok(())
}

fn load_layout(model: &Path, masks: &[&Subnetwork]) -> Result<ModelLayout> {
    let model = Model::load(model)?;
    for m in masks {
        m.validate_for(&model)?;
    }
    Ok(model.layout())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let a = Subnetwork::load(&args.a)?;
    let b = Subnetwork::load(&args.b)?;
    let layout = args.model.as_deref().map(|p| load_layout(p, &[&a, &b])).transpose()?;
    let report = subnetwork::overlap(&a, &b, layout.as_ref())?;
    write(&args.json, &report.to_json())?;
    write(&args.csv, &report.to_csv())?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn cmd_viz(args: &VizArgs) -> Result<()> {
    let a = Subnetwork::load(&args.a)?;
    let b = args.b.as_deref().map(Subnetwork::load).transpose()?;
    let mut masks = vec![&a];
    masks.extend(b.as_ref());
    let layout = load_layout(&args.model, &masks)?;
    let mut spec = VizSpec::new(&a, b.as_ref());
    spec.cell_size = args.cell_size;
    let rendered = viz::render(&spec, &layout)?;
    write(&args.out, &rendered.svg)?;
    write(&sibling(&args.out, ".svg", ".json"), &to_json(&rendered.sidecar))?;
    match &b {
        Some(b) => {
            let report = subnetwork::overlap(&a, b, Some(&layout))?;
            write(
                &sibling(&args.out, ".svg", ".summary.svg"),
                &viz::render_summary(&report),
            )?;
        }
        None => info!("single mask: no overlap summary chart"),
    }
    info!("wrote {}", args.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Discover(a) => cmd_discover(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

/// Effective defaults, for documentation and `--config` templates.
pub fn default_config_json() -> String {
    to_json(&RunConfig::default())
}
