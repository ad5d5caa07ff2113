//! `latent-tucker`: train, adapt, evaluate and analyse grouped-Tucker networks
//! on synthetic domains. Every numeric result is printed as a `key=value`
//! line; all randomness flows from the seed flags.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_tucker::checkpoint::{load_checkpoint, save_checkpoint};
use latent_tucker::data::{generate_dataset, Dataset, DomainShift, Generator, SyntheticDomainSpec};
use latent_tucker::gradcheck::RELATIVE_TOLERANCE;
use latent_tucker::metrics::{compression_report, decathlon_score, ParamReport, ScoreConfig, TaskScore};
use latent_tucker::network::{ArchConfig, HeadInit, Model, TrainMode};
use latent_tucker::param::FactorInit;
use latent_tucker::rng::seeded;
use latent_tucker::train::{
    adapt_new_task, data_fraction_sweep, evaluate, gradcheck, lambda_sweep, random_batch, train_source, AdaptOptions,
    TrainConfig,
};
use latent_tucker::Error;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "latent-tucker", version, about = "Incremental multi-domain learning with a shared Tucker core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model, train core and source factors, save a checkpoint.
    TrainSource {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "source")]
        task: String,
        #[arg(long, value_enum, default_value_t = Arch::Desk)]
        arch: Arch,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Attach a new task to a trained checkpoint and fine-tune it with the cores frozen.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output checkpoint; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "source")]
        parent: String,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Eval-mode loss and accuracy of one task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "source")]
        task: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Decathlon score of a file of `task=<name> baseline=<E> error=<E> [exponent=<λ>]` lines.
    Score {
        #[arg(long)]
        errors: PathBuf,
        /// Relative parameter count for the parameter-normalized score.
        #[arg(long)]
        relative_params: Option<f64>,
    },
    /// Closed-form parameter counts of an architecture.
    AnalyzeParams {
        #[arg(long, value_enum, default_value_t = Arch::Default)]
        arch: Arch,
        /// Number of classes of the head used for the trainable fraction.
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Compare back-propagated gradients of the desk model with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Tensors up to this size are probed at every entry.
        #[arg(long, default_value_t = 64)]
        exhaustive_limit: usize,
        /// Random entries probed in larger tensors.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
    },
    /// Adaptation accuracy as a function of the fraction of training data.
    SweepData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "source")]
        parent: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.5, 1.0])]
        fractions: Vec<f64>,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Adaptation accuracy for several orthogonality weights.
    SweepLambda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "source")]
        parent: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.01, 0.001])]
        lambdas: Vec<f64>,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write a synthetic dataset to a record file.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Default,
    Desk,
}

impl Arch {
    fn config(self) -> ArchConfig {
        match self {
            Arch::Default => ArchConfig::default(),
            Arch::Desk => ArchConfig::desk(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Shapes,
    Textures,
    Glyphs,
}

#[derive(Args)]
struct DataArgs {
    /// Training record file; generated from the flags below when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out record file; generated with a derived seed when absent.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GeneratorArg::Shapes)]
    generator: GeneratorArg,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    invert: bool,
    #[arg(long, default_value_t = 0)]
    quarter_turns: u8,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Seed of a label permutation.
    #[arg(long)]
    relabel: Option<u64>,
}

impl DataArgs {
    fn spec(&self, samples_per_class: usize, seed: u64) -> SyntheticDomainSpec {
        let generator = match self.generator {
            GeneratorArg::Shapes => Generator::Shapes,
            GeneratorArg::Textures => Generator::Textures,
            GeneratorArg::Glyphs => Generator::Glyphs,
        };
        SyntheticDomainSpec {
            generator,
            num_classes: self.classes,
            samples_per_class,
            resolution: self.resolution,
            shift: DomainShift {
                invert: self.invert,
                quarter_turns: self.quarter_turns,
                noise: self.noise,
                relabel: self.relabel,
            },
            seed,
        }
    }

    fn train_set(&self) -> Result<Dataset> {
        Ok(match &self.data {
            Some(p) => Dataset::read_records(p).with_context(|| format!("reading {}", p.display()))?,
            None => generate_dataset(&self.spec(self.samples_per_class, self.data_seed))?,
        })
    }

    fn test_set(&self) -> Result<Dataset> {
        Ok(match (&self.test_data, &self.data) {
            (Some(p), _) => Dataset::read_records(p).with_context(|| format!("reading {}", p.display()))?,
            (None, Some(_)) => bail!(Error::InvalidConfig("--data needs a matching --test-data".into())),
            (None, None) => generate_dataset(&self.spec(self.test_samples_per_class, held_out_seed(self.data_seed)))?,
        })
    }
}

fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x005e_ed0f_7e57
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    /// Divide the learning rate by 10 every this many epochs.
    #[arg(long, default_value_t = 20)]
    lr_step: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_augment: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_step: self.lr_step,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lambda_orth: self.lambda,
            batch_size: self.batch_size,
            seed: self.seed,
            augment: !self.no_augment,
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Adapt)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FactorInitArg::Warm)]
    factor_init: FactorInitArg,
    #[arg(long, value_enum, default_value_t = HeadInitArg::Fresh)]
    head_init: HeadInitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adapt,
    HeadOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorInitArg {
    Warm,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadInitArg {
    Fresh,
    Copy,
}

impl AdaptArgs {
    fn options(&self) -> AdaptOptions {
        AdaptOptions {
            mode: match self.mode {
                ModeArg::Adapt => TrainMode::Adapt,
                ModeArg::HeadOnly => TrainMode::HeadOnly,
            },
            factor_init: match self.factor_init {
                FactorInitArg::Warm => FactorInit::WarmStart,
                FactorInitArg::Random => FactorInit::RandomOrthonormal,
            },
            head_init: match self.head_init {
                HeadInitArg::Fresh => HeadInit::Fresh,
                HeadInitArg::Copy => HeadInit::Copy,
            },
        }
    }
}

fn print_log(e: &latent_tucker::train::EpochLog) {
    println!("{e}");
}

fn load(path: &Path) -> Result<Model> {
    if !path.exists() {
        bail!(MissingCheckpoint(path.to_path_buf()));
    }
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Debug)]
struct MissingCheckpoint(PathBuf);

impl std::fmt::Display for MissingCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "checkpoint {} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingCheckpoint {}

#[derive(Debug)]
struct GradcheckFailed(f64);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max relative gradient error {:.3e} exceeds {RELATIVE_TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn parse_score_file(text: &str) -> Result<(BTreeMap<String, f64>, ScoreConfig)> {
    let mut errors = BTreeMap::new();
    let mut config = ScoreConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| anyhow!("line {}: `{tok}` is not key=value", lineno + 1))?;
            fields.insert(k, v);
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| anyhow!("line {}: missing `{k}`", lineno + 1));
        let num =
            |k: &str| -> Result<f64> { field(k)?.parse().with_context(|| format!("line {}: bad `{k}`", lineno + 1)) };
        let task = field("task")?.to_string();
        let mut score = TaskScore::new(num("baseline")?);
        if fields.contains_key("exponent") {
            score.exponent = num("exponent")?;
        }
        if errors.insert(task.clone(), num("error")?).is_some() {
            bail!(Error::DuplicateTask(task));
        }
        config.tasks.insert(task, score);
    }
    Ok((errors, config))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource { out, task, arch, data, train } => {
            let train_set = data.train_set()?;
            let test_set = data.test_set()?;
            let config = ArchConfig {
                num_classes: train_set.num_classes(),
                input_resolution: train_set.resolution(),
                ..arch.config()
            };
            let cfg = train.config();
            let mut model = Model::build(config, &task, &mut seeded(cfg.seed))?;
            train_source(&mut model, &task, &train_set, &cfg, &mut print_log)?;
            let (loss, accuracy) = evaluate(&model, &task, &test_set, cfg.batch_size)?;
            println!("task={task} split=test loss={loss:.6} accuracy={accuracy:.4}");
            save_checkpoint(&model, &out)?;
            println!("checkpoint={}", out.display());
        }
        Command::Adapt { checkpoint, out, task, parent, adapt, data, train } => {
            let mut model = load(&checkpoint)?;
            let (train_set, test_set) = (data.train_set()?, data.test_set()?);
            let cfg = train.config();
            adapt_new_task(&mut model, &parent, &task, &train_set, &cfg, adapt.options(), &mut print_log)?;
            let (loss, accuracy) = evaluate(&model, &task, &test_set, cfg.batch_size)?;
            println!("task={task} split=test loss={loss:.6} accuracy={accuracy:.4}");
            let out = out.unwrap_or(checkpoint);
            save_checkpoint(&model, &out)?;
            println!("checkpoint={}", out.display());
        }
        Command::Eval { checkpoint, task, data } => {
            let model = load(&checkpoint)?;
            let test_set = data.test_set()?;
            let (loss, accuracy) = evaluate(&model, &task, &test_set, 64)?;
            println!("task={task} split=test loss={loss:.6} accuracy={accuracy:.4}");
        }
        Command::Score { errors, relative_params } => {
            let text = std::fs::read_to_string(&errors).with_context(|| format!("reading {}", errors.display()))?;
            let (errs, config) = parse_score_file(&text)?;
            let report = decathlon_score(&errs, &config)?;
            for line in report.records() {
                println!("{line}");
            }
            if let Some(rel) = relative_params {
                println!(
                    "escore={:.4} escore_rounded={}",
                    latent_tucker::metrics::escore(report.total, rel)?,
                    latent_tucker::metrics::escore_rounded(report.total, rel)?
                );
            }
        }
        Command::AnalyzeParams { arch, classes } => {
            let config = arch.config();
            let layouts = config.layouts()?;
            let report = ParamReport::new(&layouts);
            println!("{report}");
            for line in report.records() {
                println!("{line}");
            }
            let (selected, total) = config.count_params(classes, TrainMode::Adapt)?;
            println!(
                "adapt_params={selected} total_params={total} adapt_fraction={:.6}",
                selected as f64 / total as f64
            );
            let halve = |k: &[usize]| {
                layouts
                    .iter()
                    .map(|l| {
                        let mut r = l.ranks;
                        k.iter().for_each(|&m| r[m] = (r[m] / 2).max(1));
                        r
                    })
                    .collect::<Vec<_>>()
            };
            for row in compression_report(&layouts, &[halve(&[4]), halve(&[0, 1])])? {
                println!(
                    "truncation ranks={:?} layerwise_ratio={:.4} grouped_ratio={:.4}",
                    row.ranks, row.layerwise_ratio, row.grouped_ratio
                );
            }
        }
        Command::Gradcheck { seed, batch, resolution, exhaustive_limit, samples, lambda } => {
            let config = ArchConfig { input_resolution: resolution, ..ArchConfig::desk() };
            let mut rng = seeded(seed);
            let model = Model::build(config.clone(), "source", &mut rng)?;
            let (x, y) = random_batch(batch, resolution, config.num_classes, &mut rng);
            let report =
                gradcheck(&model, "source", &x, &y, TrainMode::Source, lambda, exhaustive_limit, samples, &mut rng)?;
            for (id, probes, err) in &report.params {
                println!("param={id} probes={probes} max_rel_error={err:.3e}");
            }
            println!("max_rel_error={:.3e} tolerance={RELATIVE_TOLERANCE:e}", report.max_error);
            if report.max_error > RELATIVE_TOLERANCE {
                bail!(GradcheckFailed(report.max_error));
            }
        }
        Command::SweepData { checkpoint, parent, fractions, adapt, data, train } => {
            let model = load(&checkpoint)?;
            let (train_set, test_set) = (data.train_set()?, data.test_set()?);
            for row in data_fraction_sweep(
                &model,
                &parent,
                &train_set,
                &test_set,
                &fractions,
                &train.config(),
                adapt.options(),
            )? {
                println!("fraction={} train_size={} accuracy={:.4}", row.fraction, row.train_size, row.accuracy);
            }
        }
        Command::SweepLambda { checkpoint, parent, lambdas, adapt, data, train } => {
            let model = load(&checkpoint)?;
            let (train_set, test_set) = (data.train_set()?, data.test_set()?);
            for row in lambda_sweep(&model, &parent, &train_set, &test_set, &lambdas, &train.config(), adapt.options())?
            {
                println!("lambda={} accuracy={:.4} lambda_loss={:.6e}", row.lambda, row.accuracy, row.lambda_loss);
            }
        }
        Command::GenerateData { out, data } => {
            let set = data.train_set()?;
            set.write_records(&out)?;
            println!(
                "records={} classes={} resolution={} path={}",
                set.len(),
                set.num_classes(),
                set.resolution(),
                out.display()
            );
        }
    }
    Ok(())
}

/// Exit codes: 2 usage (clap), 3 invalid configuration, 4 unknown task,
/// 5 missing checkpoint or I/O, 6 corrupt checkpoint, 7 divergence,
/// 8 gradient check failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<MissingCheckpoint>().is_some() {
        return (5, "missing-checkpoint");
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return (8, "gradcheck");
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidConfig(_) | Error::RankExceedsDimension { .. } | Error::DuplicateTask(_)) => {
            (3, "invalid-config")
        }
        Some(Error::UnknownTask(_)) => (4, "unknown-task"),
        Some(Error::Io(_)) => (5, "io"),
        Some(Error::Checksum { .. } | Error::VersionMismatch { .. } | Error::Format(_)) => (6, "corrupt-file"),
        Some(Error::Diverged { .. }) => (7, "diverged"),
        _ if err.chain().any(|e| e.is::<std::io::Error>()) => (5, "io"),
        _ => (1, "error"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, category) = exit_code(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
