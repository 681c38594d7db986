//! The `segcotrain` command-line interface.
//!
//! Every command is deterministic given its flags and seed. Exit codes are
//! stable so scripts can branch on them; see [`exit`].

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use segcotrain_core::data::{generate_synthetic, MANIFEST_NAME};
use segcotrain_core::metrics::evaluate;
use segcotrain_core::trainer::{init_state, run as run_training};
use segcotrain_core::{
    Checkpoint, Dataset, Dims, McpcDirection, Network, NetworkConfig, ParamVector, RunOptions, SplitManifest,
    SynthSpec, TrainConfig,
};

mod ablate;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Anything not covered below (I/O, malformed data files, ...).
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    /// A loss or activation became non-finite during training.
    pub const NUMERIC: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    /// At least one ablation sub-run failed.
    pub const ABLATION: u8 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "segcotrain", version, about = "Semi-supervised 3D segmentation by dual-student co-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic imbalanced dataset and its split manifest.
    GenData(GenDataArgs),
    /// Train both branches and write the log, checkpoints and a report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Train every on/off combination of the consistency modules.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training volumes (labeled + unlabeled).
    #[arg(long, default_value_t = 12)]
    pub volumes: usize,
    #[arg(long, default_value_t = 4)]
    pub val_volumes: usize,
    #[arg(long, default_value_t = 0.25)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Flags shared by `train` and `ablate`. Precedence: these flags, then
/// `--set`, then the config file, then built-in defaults.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `masked-teaches` or `unmasked-teaches`.
    #[arg(long)]
    pub direction: Option<McpcDirection>,
    /// Override any config key, e.g. `--set mask.ratio=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub no_mcpc: bool,
    #[arg(long)]
    pub no_cfc: bool,
    #[arg(long)]
    pub no_cmd: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Expected class count; must match the checkpoint.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Average the predictions of both students.
    #[arg(long)]
    pub ensemble: bool,
    /// Evaluate freshly initialised students built from `--config` instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Modules to vary (others stay off); default all three.
    #[arg(long, value_delimiter = ',', value_parser = ["mcpc", "cfc", "cmd"])]
    pub subset: Vec<String>,
}

/// A command-line mistake: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Ablation finished but some rows failed; the table has already been printed.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
}

impl fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} ablation runs failed", self.failed, self.total)
    }
}

impl std::error::Error for PartialFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Map an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use segcotrain_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if cause.is::<PartialFailure>() {
            return exit::ABLATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Diverged { .. } | E::NonFiniteLoss { .. } | E::NonFinite { .. } => exit::NUMERIC,
                E::Checkpoint { .. } => exit::CHECKPOINT,
                E::Config(_) => exit::USAGE,
                _ => exit::FAILURE,
            };
        }
    }
    exit::FAILURE
}

/// Parse `args` (including the program name), execute, and return the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate::ablate(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        train_volumes: a.volumes,
        val_volumes: a.val_volumes,
        dims: Dims::cube(a.size),
        num_classes: a.classes,
        noise_sigma: a.noise.unwrap_or(defaults.noise_sigma),
        labeled_fraction: a.labeled_frac,
        seed: a.seed,
        ..defaults
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_synthetic(&spec, &a.out)
        .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    println!("{}", a.out.join(MANIFEST_NAME).display());
    log::info!(
        "{} labeled, {} unlabeled, {} validation volumes",
        manifest.count(segcotrain_core::SplitTag::Labeled),
        manifest.count(segcotrain_core::SplitTag::Unlabeled),
        manifest.count(segcotrain_core::SplitTag::Val)
    );
    Ok(())
}

/// Resolve the training config: defaults < config file < `--set` < named flags.
pub fn resolve_config(a: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(n) = a.iters {
        cfg.total_iters = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if let Some(d) = a.direction {
        cfg.direction = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_manifest(path: Option<&Path>) -> Result<SplitManifest> {
    let path = path.ok_or_else(|| usage("--manifest is required"))?;
    if !path.is_file() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    Ok(SplitManifest::read(path)?)
}

/// Load the dataset named by `--manifest` for `num_classes`.
pub fn load_dataset(path: Option<&Path>, num_classes: usize) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    Dataset::load(&manifest, num_classes).context("loading dataset")
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    cfg.toggles.mcpc &= !a.no_mcpc;
    cfg.toggles.cfc &= !a.no_cfc;
    cfg.toggles.cmd &= !a.no_cmd;
    let data = load_dataset(a.run.manifest.as_deref(), cfg.network.num_classes)?;
    let opts = RunOptions {
        out_dir: a.run.out.clone(),
        resume: a.resume.clone(),
    };
    log::info!("training {} iterations, modules: {}", cfg.total_iters, cfg.toggles.label());
    let summary = run_training(&cfg, &data, &opts)?;
    if let Some(r) = &summary.final_report {
        print!("{}", r.table());
    }
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (net_cfg, params): (NetworkConfig, Vec<ParamVector>) = if a.random_init {
        let mut cfg = TrainConfig::default();
        if let Some(p) = &a.config {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        if let Some(c) = a.num_classes {
            cfg.network.num_classes = c;
        }
        let state = init_state(&cfg, vec![1; cfg.network.num_classes])?;
        (cfg.network, vec![state.a.student, state.b.student])
    } else {
        let path = a.checkpoint.as_ref().expect("required by clap");
        let ck = Checkpoint::load(path)?;
        let mut want = ck.config.network;
        if let Some(c) = a.num_classes {
            want.num_classes = c;
        }
        ck.check_network(&Network::new(want)?, path)?;
        (ck.config.network, vec![ck.state.a.student, ck.state.b.student])
    };
    let net = Network::new(net_cfg)?;
    let data = load_dataset(Some(&a.manifest), net_cfg.num_classes)?;
    let used: Vec<&ParamVector> = if a.ensemble { params.iter().collect() } else { vec![&params[0]] };
    let report = evaluate(&net, &used, &data.val, None)?;
    let json = serde_json::to_string_pretty(&report)?;
    print!("{}", report.table());
    println!("{json}");
    if let Some(p) = &a.json {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
