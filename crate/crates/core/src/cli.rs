//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then an optional TOML
//! file given with `--config`, then flags. The resolved [`RunConfig`] is
//! written as `config.toml` into every output directory before any work
//! starts. Commands other than `gen-synth` write into a fresh run directory
//! `<out>/<command>-<timestamp>` (or `<out>/<run-name>`).
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data, file or
//! checkpoint error, 4 numerical divergence, 1 anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adversarial::AdversarialConfig;
use crate::analysis::{
    ablation_report, export_attention, gamma_sweep, vulnerability, EvalProtocol, RunCache,
    TrainedRun, DEFAULT_PERTURBATIONS, DEFAULT_SWEEP_GAMMAS,
};
use crate::data::{generate_synthetic, image_to_tensor, load_directory, ppm, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::fewshot::{eval_csv, EvalRow};
use crate::model::{
    epoch_log_csv, load_checkpoint, save_checkpoint, train, EpochLog, OptimizerKind, Preset,
    TrainConfig, Variant,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "AF_THREADS";

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

/// Every setting a command may read, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Master seed of training and synthesis.
    pub seed: u64,
    /// Dataset directory. Without one, the `synth` section is generated in
    /// memory.
    pub data: Option<PathBuf>,
    /// Parent of run directories; the dataset directory for `gen-synth`.
    pub out: PathBuf,
    /// Directory of reusable finished training runs.
    pub cache: Option<PathBuf>,
    pub gammas: Vec<f32>,
    pub perturbations: Vec<f32>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Desk,
            seed: 1,
            data: None,
            out: PathBuf::from("runs"),
            cache: None,
            gammas: DEFAULT_SWEEP_GAMMAS.to_vec(),
            perturbations: DEFAULT_PERTURBATIONS.to_vec(),
            variants: Variant::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.synth.validate()
    }

    /// Loads `data` if set, otherwise generates the `synth` dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            Some(dir) => load_directory(dir, self.preset.input_size())?,
            None => {
                if self.synth.image_size != self.preset.input_size() {
                    return Err(Error::Config(format!(
                        "synth.image_size {} does not match preset {} input {}",
                        self.synth.image_size,
                        self.preset.tag(),
                        self.preset.input_size()
                    )));
                }
                generate_synthetic(&self.synth)?
            }
        };
        ds.validate()?;
        Ok(ds)
    }

    fn run_cache(&self) -> Option<RunCache> {
        self.cache.as_ref().map(RunCache::new)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

#[derive(Debug, Clone)]
struct List<T>(Vec<T>);

fn list<T: std::str::FromStr>(s: &str) -> std::result::Result<List<T>, String>
where
    T::Err: std::fmt::Display,
{
    parse_list(s).map(List)
}

#[derive(Debug, Parser)]
#[command(name = "advfeat", version, about = "Few-shot learning with adversarial feature pooling")]
struct Cli {
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct CommonFlags {
    /// Backbone preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by gen-synth or laid out the same way.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Fixed run directory name instead of a timestamp.
    #[arg(long)]
    run_name: Option<String>,
    /// Reuse finished training runs stored in this directory.
    #[arg(long, value_name = "DIR")]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// full, c5-cls, c5-adv or c5-c7-cls.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f32>,
    /// Mask step size.
    #[arg(long)]
    gamma: Option<f32>,
    /// Cosine scale of the training losses.
    #[arg(long)]
    scale: Option<f32>,
    /// Cosine scale of the entropy used for the mask.
    #[arg(long)]
    scale_adv: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Disable horizontal flip augmentation.
    #[arg(long)]
    no_flip: bool,
    /// Validation episodes per epoch (0 disables model selection).
    #[arg(long)]
    val_episodes: Option<usize>,
    /// Back-propagate through the mask update instead of treating it as
    /// constant.
    #[arg(long)]
    second_order: bool,
}

#[derive(Debug, Args, Default)]
struct EvalFlags {
    #[arg(long)]
    way: Option<usize>,
    /// Comma-separated shot counts, e.g. 1,5.
    #[arg(long, value_parser = list::<usize>)]
    shot: Option<List<usize>>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Queries per class.
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural dataset and write it to --out.
    GenSynth {
        #[arg(long, value_name = "DIR", required = true)]
        out: PathBuf,
        #[arg(long)]
        train_classes: Option<usize>,
        #[arg(long)]
        val_classes: Option<usize>,
        #[arg(long)]
        test_classes: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant and save the selected checkpoint.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint on test-split episodes.
    Eval {
        #[arg(long, value_name = "FILE", required = true)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Seed of the episode sampler.
        #[arg(long)]
        episode_seed: Option<u64>,
    },
    /// Train and evaluate one model per mask step size.
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Comma-separated step sizes in (0, 1].
        #[arg(long, value_parser = list::<f32>)]
        gammas: Option<List<f32>>,
    },
    /// Train-class accuracy under growing feature perturbations.
    Vulnerability {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Variants to train when no checkpoints are given.
        #[arg(long, value_parser = list::<Variant>)]
        variants: Option<List<Variant>>,
        /// Comma-separated checkpoints to analyse instead of training.
        #[arg(long, value_parser = list::<PathBuf>)]
        checkpoints: Option<List<PathBuf>>,
        /// Comma-separated perturbation step sizes.
        #[arg(long, value_parser = list::<f32>)]
        perturbations: Option<List<f32>>,
    },
    /// Write mask-gradient heatmaps for a checkpoint and PPM images.
    ExportAttention {
        #[arg(long, value_name = "FILE", required = true)]
        checkpoint: PathBuf,
        /// Comma-separated PPM files.
        #[arg(long, value_parser = list::<PathBuf>, required = true)]
        images: List<PathBuf>,
        /// Pixels per feature-map cell in the PGM rendering.
        #[arg(long, default_value_t = 16)]
        upscale: usize,
        #[arg(long)]
        gamma: Option<f32>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Train every variant under every seed and tabulate test accuracy.
    Ablation {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, value_parser = list::<Variant>)]
        variants: Option<List<Variant>>,
        #[arg(long, value_parser = list::<u64>)]
        seeds: Option<List<u64>>,
    },
}

impl CommonFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.preset {
            cfg.preset = Preset::from_tag(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(c) = &self.cache {
            cfg.cache = Some(c.clone());
        }
        Ok(())
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) -> Result<()> {
        if let Some(v) = &self.variant {
            t.variant = v.parse()?;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.lr {
            t.learning_rate = lr;
        }
        if let Some(g) = self.gamma {
            t.adversarial.gamma = g;
        }
        if let Some(s) = self.scale {
            t.scale_train = s;
        }
        if let Some(s) = self.scale_adv {
            t.adversarial.scale_adv = s;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = Some(b);
        }
        if let Some(o) = &self.optimizer {
            t.optimizer = OptimizerKind::from_tag(o).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.no_flip {
            t.augment_flip = false;
        }
        if let Some(v) = self.val_episodes {
            t.val_episodes = v;
        }
        if self.second_order {
            t.adversarial.stop_gradient = false;
        }
        Ok(())
    }
}

impl EvalFlags {
    fn apply(&self, e: &mut EvalProtocol) {
        if let Some(w) = self.way {
            e.way = w;
        }
        if let Some(List(s)) = &self.shot {
            e.shots = s.clone();
        }
        if let Some(n) = self.episodes {
            e.episodes = n;
        }
        if let Some(q) = self.queries {
            e.queries = q;
        }
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(e) if e.exit_code() == 0 => EXIT_OK,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) => error_exit_code(e),
        }
    }
}

pub fn error_exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::ShapeMismatch { .. } => EXIT_DATA,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`], if set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when called twice in one process; the first
    // size stands.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Creates `<out>/<name>` where `name` is `run_name` or
/// `<command>-<timestamp>`, suffixed if taken.
fn create_run_dir(out: &Path, command: &str, run_name: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = match run_name {
        Some(n) => n.to_string(),
        None => format!("{command}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S")),
    };
    for k in 1.. {
        let name = if k == 1 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && run_name.is_none() => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("the suffix search is unbounded")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn start_run(cfg: &RunConfig, command: &str, run_name: Option<&str>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = create_run_dir(&cfg.out, command, run_name)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    Ok(dir)
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn print_epoch(prefix: &str, log: &EpochLog) {
    let val = log.val_1shot_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{prefix}epoch {:>3}  l_h {:.4}  l_l {:.4}  l_ent {:.4}  lr {:.2e}  train_acc {:.4}  val {val}",
        log.epoch, log.l_h, log.l_l, log.l_ent, log.lr, log.train_acc
    );
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            ExitCode::from(if e.exit_code() == 0 { EXIT_OK } else { EXIT_USAGE })
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}

pub fn run<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Usage)?;
    configure_threads()?;
    let mut cfg = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth {
            out,
            train_classes,
            val_classes,
            test_classes,
            images_per_class,
            image_size,
            seed,
        } => {
            let s = &mut cfg.synth;
            s.n_train = train_classes.unwrap_or(s.n_train);
            s.n_val = val_classes.unwrap_or(s.n_val);
            s.n_test = test_classes.unwrap_or(s.n_test);
            s.images_per_class = images_per_class.unwrap_or(s.images_per_class);
            s.image_size = image_size.unwrap_or(s.image_size);
            s.seed = seed.unwrap_or(s.seed);
            cfg.out = out;
            cmd_gen_synth(&cfg)?;
        }
        Command::Train { common, train } => {
            common.apply(&mut cfg)?;
            train.apply(&mut cfg.train)?;
            cmd_train(&cfg, common.run_name.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            common,
            eval,
            episode_seed,
        } => {
            common.apply(&mut cfg)?;
            eval.apply(&mut cfg.eval);
            if let Some(s) = episode_seed {
                cfg.eval.seed = s;
            }
            cmd_eval(&cfg, &checkpoint, common.run_name.as_deref())?;
        }
        Command::Sweep {
            common,
            train,
            eval,
            gammas,
        } => {
            common.apply(&mut cfg)?;
            train.apply(&mut cfg.train)?;
            eval.apply(&mut cfg.eval);
            if let Some(List(g)) = gammas {
                cfg.gammas = g;
            }
            cmd_sweep(&cfg, common.run_name.as_deref())?;
        }
        Command::Vulnerability {
            common,
            train,
            variants,
            checkpoints,
            perturbations,
        } => {
            common.apply(&mut cfg)?;
            train.apply(&mut cfg.train)?;
            if let Some(List(v)) = variants {
                cfg.variants = v;
            }
            if let Some(List(p)) = perturbations {
                cfg.perturbations = p;
            }
            let checkpoints = checkpoints.map(|List(c)| c).unwrap_or_default();
            cmd_vulnerability(&cfg, &checkpoints, common.run_name.as_deref())?;
        }
        Command::ExportAttention {
            checkpoint,
            images,
            upscale,
            gamma,
            common,
        } => {
            common.apply(&mut cfg)?;
            if let Some(g) = gamma {
                cfg.train.adversarial.gamma = g;
            }
            cmd_export_attention(&cfg, &checkpoint, &images.0, upscale, common.run_name.as_deref())?;
        }
        Command::Ablation {
            common,
            train,
            eval,
            variants,
            seeds,
        } => {
            common.apply(&mut cfg)?;
            train.apply(&mut cfg.train)?;
            eval.apply(&mut cfg.eval);
            if let Some(List(v)) = variants {
                cfg.variants = v;
            }
            if let Some(List(s)) = seeds {
                cfg.seeds = s;
            }
            cmd_ablation(&cfg, common.run_name.as_deref())?;
        }
    }
    Ok(())
}

/// Writes the `synth` dataset to `out` with its manifest and the resolved
/// config.
pub fn cmd_gen_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.synth.validate()?;
    let ds = generate_synthetic(&cfg.synth)?;
    ds.write(&cfg.out)?;
    write_file(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
    let (tr, va, te) = ds.split_sizes();
    println!("wrote {tr}/{va}/{te} train/val/test classes to {}", cfg.out.display());
    Ok(cfg.out.clone())
}

/// Trains `cfg.train.variant`; writes `log.csv`, `best.afck` and
/// `last.afck`.
pub fn cmd_train(cfg: &RunConfig, run_name: Option<&str>) -> Result<PathBuf> {
    let dir = start_run(cfg, "train", run_name)?;
    let ds = cfg.dataset()?;
    let log_path = dir.join("log.csv");
    let mut rows = Vec::new();
    let outcome = train(&ds, cfg.preset, &cfg.train, cfg.seed, |log| {
        print_epoch("", log);
        rows.push(log.clone());
        // Kept current so a divergence leaves the finished epochs on disk.
        let _ = fs::write(&log_path, epoch_log_csv(&rows));
    })?;
    write_file(&log_path, &epoch_log_csv(&outcome.epochs))?;
    save_checkpoint(&outcome.best, &dir.join("best.afck"))?;
    save_checkpoint(&outcome.last, &dir.join("last.afck"))?;
    println!(
        "best epoch {} (val {}), run directory {}",
        outcome.best_epoch,
        outcome.best_val.map_or("-".into(), |v| format!("{v:.4}")),
        dir.display()
    );
    Ok(dir)
}

/// Evaluates a checkpoint on the test split for every configured shot count;
/// writes `report.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, run_name: Option<&str>) -> Result<PathBuf> {
    let state = load_checkpoint(checkpoint)?;
    let cfg = RunConfig {
        preset: state.model.preset(),
        ..cfg.clone()
    };
    let dir = start_run(&cfg, "eval", run_name)?;
    let ds = cfg.dataset()?;
    let rows: Vec<EvalRow> = cfg
        .eval
        .evaluate_test(&ds, &state.model)?
        .into_iter()
        .map(|(shot, r)| EvalRow {
            way: cfg.eval.way,
            shot,
            episodes: cfg.eval.episodes,
            mean_acc: r.mean,
            ci95: r.ci95,
            seed: cfg.eval.seed,
            checkpoint: checkpoint.display().to_string(),
        })
        .collect();
    let report = eval_csv(&rows);
    write_file(&dir.join("report.csv"), &report)?;
    print!("{report}");
    Ok(dir)
}

pub fn cmd_sweep(cfg: &RunConfig, run_name: Option<&str>) -> Result<PathBuf> {
    let dir = start_run(cfg, "sweep", run_name)?;
    let ds = cfg.dataset()?;
    let cache = cfg.run_cache();
    let result = gamma_sweep(
        &ds,
        cfg.preset,
        &cfg.gammas,
        &cfg.train,
        cfg.seed,
        &cfg.eval,
        cache.as_ref(),
        |g, log| print_epoch(&format!("γ={g} "), log),
    )?;
    let mut csv = result.csv();
    for (g, e) in &result.failures {
        let _ = writeln!(csv, "# failed gamma {g}: {e}");
    }
    write_file(&dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(dir)
}

pub fn cmd_vulnerability(cfg: &RunConfig, checkpoints: &[PathBuf], run_name: Option<&str>) -> Result<PathBuf> {
    let dir = start_run(cfg, "vulnerability", run_name)?;
    let ds = cfg.dataset()?;
    let mut labelled = Vec::new();
    if checkpoints.is_empty() {
        let cache = cfg.run_cache();
        for &variant in &cfg.variants {
            let t = TrainConfig {
                variant,
                ..cfg.train.clone()
            };
            let prefix = format!("{variant} ");
            let run: TrainedRun =
                crate::analysis::train_run(&ds, cfg.preset, &t, cfg.seed, cache.as_ref(), |l| print_epoch(&prefix, l))?;
            labelled.push((variant.tag().to_string(), run.state));
        }
    } else {
        for path in checkpoints {
            let state = load_checkpoint(path)?;
            let stem = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
            labelled.push((format!("{}:{stem}", state.variant), state));
        }
    }
    let models: Vec<(String, _)> = labelled.iter().map(|(l, s)| (l.clone(), &s.model)).collect();
    let curve = vulnerability(&models, &ds.train, &cfg.perturbations)?;
    let mut csv = curve.csv();
    write_file(&dir.join("vulnerability.csv"), &csv)?;
    let mut auc = String::from("variant,auc\n");
    for (label, _) in &curve.clean {
        let _ = writeln!(auc, "{label},{:.6}", curve.auc(label).unwrap_or(f64::NAN));
    }
    write_file(&dir.join("auc.csv"), &auc)?;
    csv.push('\n');
    csv.push_str(&auc);
    print!("{csv}");
    Ok(dir)
}

pub fn cmd_export_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    upscale: usize,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    let state = load_checkpoint(checkpoint)?;
    let cfg = RunConfig {
        preset: state.model.preset(),
        ..cfg.clone()
    };
    let dir = start_run(&cfg, "export-attention", run_name)?;
    let size = cfg.preset.input_size();
    let mut named = Vec::with_capacity(images.len());
    for path in images {
        let stem = path
            .file_stem()
            .ok_or_else(|| Error::Data(format!("{} has no file name", path.display())))?
            .to_string_lossy()
            .into_owned();
        if named.iter().any(|(s, _)| *s == stem) {
            return Err(Error::Data(format!("two images share the name `{stem}`")));
        }
        named.push((stem, image_to_tensor(&ppm::read(path)?, size)?));
    }
    let adv = AdversarialConfig {
        scale_adv: state.model.classifier.scale_adv,
        ..cfg.train.adversarial
    };
    let files = export_attention(&state.model, &named, &adv, &dir, upscale)?;
    for f in &files {
        println!("{}\n{}\n{}", f.delta_csv.display(), f.delta_pgm.display(), f.adv_mask_csv.display());
    }
    Ok(dir)
}

pub fn cmd_ablation(cfg: &RunConfig, run_name: Option<&str>) -> Result<PathBuf> {
    let dir = start_run(cfg, "ablation", run_name)?;
    let ds = cfg.dataset()?;
    let cache = cfg.run_cache();
    let report = ablation_report(
        &ds,
        cfg.preset,
        &cfg.variants,
        &cfg.seeds,
        &cfg.train,
        &cfg.eval,
        cache.as_ref(),
        |v, seed, log| print_epoch(&format!("{v} seed {seed} "), log),
    )?;
    let csv = report.csv();
    write_file(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(dir)
}
