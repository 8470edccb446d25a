//! Command-line interface: `train`, `eval`, `sweep` and `gradcheck`
//! subcommands over a single flat key=value config file with flag
//! overrides. Exit codes: 0 success, 1 runtime failure, 2 usage/config
//! error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{make_synthetic, parse_fer2013, Dataset, Split};
use crate::error::Error;
use crate::model::{ArchSpec, Model, PlacementConfig};
use crate::report::{
    evaluate, export_report, placement_sweep, sigma_profile, sweep_one, write_sweep, EvalMode,
    ReportFormat, SweepReport, TrainRecord,
};
use crate::trainer::{
    gradcheck_model, train, CheckScope, GradcheckConfig, KlWeight, TrainConfig,
};
use crate::seeded_rng;

#[derive(Parser)]
#[command(
    name = "pbnn",
    version,
    about = "Partially-Bayesian convolutional networks: training, evaluation, placement sweeps and gradient checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a training report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test splits.
    Eval(EvalArgs),
    /// Train one configuration per uncertainty placement and compare.
    Sweep(SweepArgs),
    /// Validate analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, reports and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the built-in synthetic 7-class dataset.
    #[arg(long)]
    synthetic: bool,
    /// FER2013 CSV path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Images per class for the synthetic dataset.
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Pixel noise level for the synthetic dataset.
    #[arg(long)]
    noise: Option<f64>,
    /// Architecture preset: desk, full or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Report format: jsonl or csv.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate η.
    #[arg(long)]
    lr: Option<f64>,
    /// Monte-Carlo samples per uncertain-phase step.
    #[arg(long)]
    mc_samples: Option<u32>,
    /// KL weight: "auto" (1/batches-per-epoch) or a positive float.
    #[arg(long)]
    kl_weight: Option<String>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    prior_sigma: Option<f64>,
    /// Horizontal-flip augmentation on the Training split.
    #[arg(long)]
    hflip: bool,
    /// Pixel normalization: unit or standardize.
    #[arg(long)]
    normalization: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Bayesian groups, e.g. "5", "4,5" or "none".
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate (default: <out>/checkpoint.pbnn).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated splits: public, private, training.
    #[arg(long)]
    splits: Option<String>,
    /// Evaluation mode: mean or mc.
    #[arg(long)]
    mode: Option<String>,
    /// Monte-Carlo samples for mc mode.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Groups to sweep, one configuration per group (default "1,2,3,4,5").
    #[arg(long)]
    groups: Option<String>,
    /// Run up to K sweep configurations in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Relative-error tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Which parameters to check: all, bayes-only or certain-only.
    #[arg(long)]
    layer: Option<String>,
    /// Bayesian groups of the self-built tiny model.
    #[arg(long)]
    groups: Option<String>,
    /// Checked indices per tensor.
    #[arg(long)]
    samples_per_tensor: Option<usize>,
}

/// Fully-resolved run configuration, echoed before work begins and written
/// to `<out>/config.json` for provenance.
#[derive(Debug, Clone, serde::Serialize)]
struct ResolvedConfig {
    command: String,
    seed: u64,
    out: PathBuf,
    dataset: DatasetSource,
    preset: String,
    groups: Vec<u8>,
    epochs: u32,
    batch_size: usize,
    lr: f64,
    mc_samples: u32,
    kl_weight: String,
    eval_every: u32,
    momentum: f64,
    prior_sigma: f64,
    hflip: bool,
    normalization: String,
    format: String,
    mode: String,
    samples: usize,
    splits: Vec<String>,
    checkpoint: Option<PathBuf>,
    jobs: usize,
    tolerance: f64,
    layer: String,
    samples_per_tensor: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum DatasetSource {
    Synthetic { n_per_class: usize, noise: f64 },
    Fer2013 { path: PathBuf },
    None,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

const CONFIG_KEYS: [&str; 24] = [
    "seed",
    "out",
    "synthetic",
    "data",
    "n_per_class",
    "noise",
    "preset",
    "format",
    "groups",
    "epochs",
    "batch_size",
    "lr",
    "mc_samples",
    "kl_weight",
    "eval_every",
    "momentum",
    "prior_sigma",
    "hflip",
    "normalization",
    "mode",
    "samples",
    "splits",
    "jobs",
    "tolerance",
];

/// Flat `key = value` document, '#' comments, unknown keys rejected.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!(
                "config line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(usage(format!(
                "config line {}: unknown key {key:?} (known keys: {})",
                lineno + 1,
                CONFIG_KEYS.join(", ")
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn new(common: &CommonArgs) -> Result<Self, Failure> {
        let file = match &common.config {
            Some(path) => read_config_file(path)?,
            None => BTreeMap::new(),
        };
        Ok(Resolver { file })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }

    fn flag(&self, key: &str, cli_set: bool) -> Result<bool, Failure> {
        if cli_set {
            return Ok(true);
        }
        Ok(self.parsed::<bool>(key)?.unwrap_or(false))
    }
}

fn parse_groups(spec: &str) -> Result<Vec<u8>, Failure> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "none" {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u8>()
                .map_err(|_| usage(format!("group {tok:?} is not an integer")))
        })
        .collect()
}

fn parse_preset(name: &str) -> Result<ArchSpec, Failure> {
    match name {
        "desk" => Ok(ArchSpec::desk()),
        "full" => Ok(ArchSpec::full()),
        "tiny" => Ok(ArchSpec::tiny()),
        other => Err(usage(format!("unknown preset {other:?} (desk, full, tiny)"))),
    }
}

fn parse_format(name: &str) -> Result<ReportFormat, Failure> {
    name.parse::<ReportFormat>()
        .map_err(|e| usage(e.to_string()))
}

struct Resolved {
    config: ResolvedConfig,
    arch: ArchSpec,
    placement: PlacementConfig,
    train_config: TrainConfig,
    report_format: ReportFormat,
}

#[allow(clippy::too_many_arguments)]
fn resolve(
    command: &str,
    common: &CommonArgs,
    train_flags: Option<&TrainFlags>,
    groups_flag: Option<&str>,
    default_groups: &str,
    eval_args: Option<&EvalArgs>,
    sweep_jobs: Option<usize>,
    gradcheck: Option<&GradcheckArgs>,
) -> Result<Resolved, Failure> {
    let r = Resolver::new(common)?;

    let seed = match common.seed {
        Some(s) => s,
        None => r.parsed::<u64>("seed")?.unwrap_or(42),
    };
    let out = common
        .out
        .clone()
        .or_else(|| r.file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let synthetic = r.flag("synthetic", common.synthetic)?;
    let data = common
        .data
        .clone()
        .or_else(|| r.file.get("data").map(PathBuf::from));
    if synthetic && data.is_some() {
        return Err(usage("--synthetic and --data are mutually exclusive"));
    }
    let n_per_class = match common.n_per_class {
        Some(v) => v,
        None => r.parsed::<usize>("n_per_class")?.unwrap_or(140),
    };
    let noise = match common.noise {
        Some(v) => v,
        None => r.parsed::<f64>("noise")?.unwrap_or(0.05),
    };
    let dataset = if synthetic {
        DatasetSource::Synthetic { n_per_class, noise }
    } else if let Some(path) = &data {
        DatasetSource::Fer2013 { path: path.clone() }
    } else {
        DatasetSource::None
    };

    let preset_name = common
        .preset
        .clone()
        .or_else(|| r.file.get("preset").cloned())
        .unwrap_or_else(|| "desk".to_string());
    let arch = parse_preset(&preset_name)?;

    let groups_str = groups_flag
        .map(str::to_string)
        .or_else(|| r.file.get("groups").cloned())
        .unwrap_or_else(|| default_groups.to_string());
    let groups = parse_groups(&groups_str)?;
    let placement =
        PlacementConfig::from_groups(groups.iter().copied()).map_err(|e| usage(e.to_string()))?;

    let defaults = TrainConfig::default();
    let tf = train_flags.cloned().unwrap_or_default();
    let epochs = match tf.epochs {
        Some(v) => v,
        None => r.parsed::<u32>("epochs")?.unwrap_or(defaults.epochs),
    };
    let batch_size = match tf.batch_size {
        Some(v) => v,
        None => r.parsed::<usize>("batch_size")?.unwrap_or(defaults.batch_size),
    };
    let lr = match tf.lr {
        Some(v) => v,
        None => r.parsed::<f64>("lr")?.unwrap_or(defaults.learning_rate),
    };
    let mc_samples = match tf.mc_samples {
        Some(v) => v,
        None => r.parsed::<u32>("mc_samples")?.unwrap_or(defaults.mc_samples),
    };
    let kl_weight_str = tf
        .kl_weight
        .clone()
        .or_else(|| r.file.get("kl_weight").cloned())
        .unwrap_or_else(|| "auto".to_string());
    let kl_weight = if kl_weight_str == "auto" {
        KlWeight::Auto
    } else {
        let w: f64 = kl_weight_str
            .parse()
            .map_err(|_| usage(format!("kl_weight must be \"auto\" or a float, got {kl_weight_str:?}")))?;
        KlWeight::Fixed(w)
    };
    let eval_every = match tf.eval_every {
        Some(v) => v,
        None => r.parsed::<u32>("eval_every")?.unwrap_or(defaults.eval_every),
    };
    let momentum = match tf.momentum {
        Some(v) => v,
        None => r.parsed::<f64>("momentum")?.unwrap_or(defaults.momentum),
    };
    let prior_sigma = match tf.prior_sigma {
        Some(v) => v,
        None => r.parsed::<f64>("prior_sigma")?.unwrap_or(defaults.prior_sigma),
    };
    let hflip = r.flag("hflip", tf.hflip)?;
    let normalization = tf
        .normalization
        .clone()
        .or_else(|| r.file.get("normalization").cloned())
        .unwrap_or_else(|| "unit".to_string());
    if normalization != "unit" && normalization != "standardize" {
        return Err(usage(format!(
            "normalization must be unit or standardize, got {normalization:?}"
        )));
    }

    let format_name = common
        .format
        .clone()
        .or_else(|| r.file.get("format").cloned())
        .unwrap_or_else(|| "jsonl".to_string());
    let report_format = parse_format(&format_name)?;

    let mode = eval_args
        .and_then(|a| a.mode.clone())
        .or_else(|| r.file.get("mode").cloned())
        .unwrap_or_else(|| "mean".to_string());
    if mode != "mean" && mode != "mc" {
        return Err(usage(format!("mode must be mean or mc, got {mode:?}")));
    }
    let samples = match eval_args.and_then(|a| a.samples) {
        Some(v) => v,
        None => r.parsed::<usize>("samples")?.unwrap_or(32),
    };
    if samples == 0 {
        return Err(usage("samples must be at least 1"));
    }
    let splits_str = eval_args
        .and_then(|a| a.splits.clone())
        .or_else(|| r.file.get("splits").cloned())
        .unwrap_or_else(|| "public,private".to_string());
    let splits: Vec<String> = splits_str.split(',').map(|s| s.trim().to_string()).collect();
    let checkpoint = eval_args.and_then(|a| a.checkpoint.clone());

    let jobs = match sweep_jobs {
        Some(v) => v,
        None => r.parsed::<usize>("jobs")?.unwrap_or(1),
    };
    if jobs == 0 {
        return Err(usage("jobs must be at least 1"));
    }

    let tolerance = match gradcheck.and_then(|g| g.tolerance) {
        Some(v) => v,
        None => r.parsed::<f64>("tolerance")?.unwrap_or(1e-3),
    };
    let layer = gradcheck
        .and_then(|g| g.layer.clone())
        .unwrap_or_else(|| "all".to_string());
    if !["all", "bayes-only", "certain-only"].contains(&layer.as_str()) {
        return Err(usage(format!(
            "layer must be all, bayes-only or certain-only, got {layer:?}"
        )));
    }
    let samples_per_tensor = gradcheck.and_then(|g| g.samples_per_tensor).unwrap_or(16);

    let train_config = TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size,
        mc_samples,
        kl_weight,
        seed,
        eval_every,
        momentum,
        prior_sigma,
    };
    train_config.validate().map_err(|e| usage(e.to_string()))?;

    Ok(Resolved {
        config: ResolvedConfig {
            command: command.to_string(),
            seed,
            out,
            dataset,
            preset: preset_name,
            groups,
            epochs,
            batch_size,
            lr,
            mc_samples,
            kl_weight: kl_weight_str,
            eval_every,
            momentum,
            prior_sigma,
            hflip,
            normalization,
            format: format_name,
            mode,
            samples,
            splits,
            checkpoint,
            jobs,
            tolerance,
            layer,
            samples_per_tensor,
        },
        arch,
        placement,
        train_config,
        report_format,
    })
}

fn echo_config(resolved: &ResolvedConfig) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(resolved)
        .map_err(|e| Failure::Runtime(Error::InvalidConfig(format!("encoding config: {e}"))))?;
    println!("{text}");
    std::fs::create_dir_all(&resolved.out).map_err(Error::from)?;
    let file = File::create(resolved.out.join("config.json")).map_err(Error::from)?;
    serde_json::to_writer_pretty(BufWriter::new(file), resolved)
        .map_err(|e| Failure::Runtime(Error::InvalidConfig(format!("writing config: {e}"))))?;
    Ok(())
}

fn load_dataset(resolved: &Resolved) -> Result<Dataset, Failure> {
    let mut dataset = match &resolved.config.dataset {
        DatasetSource::Synthetic { n_per_class, noise } => {
            make_synthetic(*n_per_class, *noise, resolved.config.seed)
        }
        DatasetSource::Fer2013 { path } => {
            let file = File::open(path).map_err(Error::from)?;
            parse_fer2013(file)?
        }
        DatasetSource::None => {
            return Err(usage("a dataset is required: pass --synthetic or --data PATH"));
        }
    };
    if resolved.config.normalization == "standardize" {
        dataset = dataset.with_standardization()?;
    }
    Ok(dataset.with_hflip(resolved.config.hflip))
}

fn parse_split_name(name: &str) -> Result<Split, Failure> {
    match name {
        "public" | "PublicTest" => Ok(Split::PublicTest),
        "private" | "PrivateTest" => Ok(Split::PrivateTest),
        "training" | "Training" => Ok(Split::Training),
        other => Err(usage(format!(
            "unknown split {other:?} (public, private, training)"
        ))),
    }
}

fn print_eval_line(result: &crate::report::EvalResult) {
    println!(
        "split={} mode={} accuracy={:.4} ({}/{}) mean_entropy={:.4}",
        result.split,
        result.mode,
        result.accuracy,
        result.n_correct,
        result.n_total,
        result.mean_predictive_entropy
    );
}

fn cmd_train(args: TrainArgs) -> Result<i32, Failure> {
    let resolved = resolve(
        "train",
        &args.common,
        Some(&args.train),
        args.groups.as_deref(),
        "5",
        None,
        None,
        None,
    )?;
    echo_config(&resolved.config)?;
    let dataset = load_dataset(&resolved)?;

    let mut rng = seeded_rng(resolved.config.seed, 0);
    let mut model = Model::build(resolved.arch.clone(), resolved.placement.clone(), &mut rng)?;
    model.set_seed(resolved.config.seed);

    let mut records = train(&mut model, &dataset, &resolved.train_config)?;

    let last_epoch = resolved.config.epochs.saturating_sub(1);
    for split in [Split::PublicTest, Split::PrivateTest] {
        let result = evaluate(&model, &dataset, split, EvalMode::Mean, None)?;
        print_eval_line(&result);
        records.push(TrainRecord::eval(last_epoch, model.step_count(), &result));
    }
    if model.has_variational() {
        let profile = sigma_profile(&model)?;
        for stat in &profile.layers {
            println!(
                "sigma layer={} depth={} min={:.3e} mean={:.3e} max={:.3e}",
                stat.layer, stat.depth, stat.min, stat.mean, stat.max
            );
        }
    }

    let ckpt_path = resolved.config.out.join("checkpoint.pbnn");
    model.save_checkpoint(&ckpt_path)?;
    let ext = if resolved.report_format == ReportFormat::Csv { "csv" } else { "jsonl" };
    export_report(
        &records,
        resolved.config.out.join(format!("train.{ext}")),
        resolved.report_format,
    )?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, Failure> {
    let resolved = resolve("eval", &args.common, None, None, "5", Some(&args), None, None)?;
    echo_config(&resolved.config)?;
    let dataset = load_dataset(&resolved)?;

    let ckpt_path = resolved
        .config
        .checkpoint
        .clone()
        .unwrap_or_else(|| resolved.config.out.join("checkpoint.pbnn"));
    let model = Model::load_checkpoint(&ckpt_path)?;

    let mut records = Vec::new();
    let mut rng = seeded_rng(resolved.config.seed, 2);
    for name in &resolved.config.splits {
        let split = parse_split_name(name)?;
        let mode = if resolved.config.mode == "mc" {
            EvalMode::Mc {
                samples: resolved.config.samples,
            }
        } else {
            EvalMode::Mean
        };
        let result = evaluate(&model, &dataset, split, mode, Some(&mut rng))?;
        print_eval_line(&result);
        records.push(TrainRecord::eval(0, model.step_count(), &result));
    }
    let ext = if resolved.report_format == ReportFormat::Csv { "csv" } else { "jsonl" };
    export_report(
        &records,
        resolved.config.out.join(format!("eval.{ext}")),
        resolved.report_format,
    )?;
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Failure> {
    let resolved = resolve(
        "sweep",
        &args.common,
        Some(&args.train),
        args.groups.as_deref(),
        "1,2,3,4,5",
        None,
        args.jobs,
        None,
    )?;
    echo_config(&resolved.config)?;
    if resolved.config.groups.is_empty() {
        return Err(usage("sweep needs at least one group"));
    }
    let dataset = load_dataset(&resolved)?;
    let placements: Vec<PlacementConfig> = resolved
        .config
        .groups
        .iter()
        .map(|&g| PlacementConfig::single(g))
        .collect::<crate::Result<_>>()
        .map_err(|e| usage(e.to_string()))?;

    let report = if resolved.config.jobs > 1 {
        run_sweep_parallel(
            &resolved.arch,
            &placements,
            &dataset,
            &resolved.train_config,
            resolved.config.jobs,
        )?
    } else {
        placement_sweep(&resolved.arch, &placements, &dataset, &resolved.train_config)?
    };

    for entry in &report.entries {
        println!(
            "placement={} final_accuracy={:.4} wall_time_ms={:.0}",
            entry.placement.label(),
            entry.final_eval.accuracy,
            entry.wall_time_ms
        );
    }
    write_sweep(&report, &resolved.config.out, resolved.report_format)?;
    Ok(0)
}

/// Waves of at most `jobs` independent sweep configurations; the entry
/// order (and every result) is identical to the sequential run.
fn run_sweep_parallel(
    arch: &ArchSpec,
    placements: &[PlacementConfig],
    dataset: &Dataset,
    config: &TrainConfig,
    jobs: usize,
) -> Result<SweepReport, Failure> {
    let mut entries = Vec::with_capacity(placements.len());
    for wave in placements.chunks(jobs) {
        let mut wave_entries = Vec::with_capacity(wave.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|placement| scope.spawn(move || sweep_one(arch, placement, dataset, config)))
                .collect();
            for handle in handles {
                wave_entries.push(handle.join().expect("sweep worker panicked"));
            }
        });
        for entry in wave_entries {
            entries.push(entry?);
        }
    }
    Ok(SweepReport {
        arch: arch.clone(),
        config: config.clone(),
        entries,
    })
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, Failure> {
    let resolved = resolve(
        "gradcheck",
        &args.common,
        None,
        args.groups.as_deref(),
        "5",
        None,
        None,
        Some(&args),
    )?;
    echo_config(&resolved.config)?;

    let scope = match resolved.config.layer.as_str() {
        "bayes-only" => CheckScope::BayesOnly,
        "certain-only" => CheckScope::CertainOnly,
        _ => CheckScope::All,
    };
    if scope == CheckScope::BayesOnly && resolved.config.groups.is_empty() {
        return Err(usage("--layer bayes-only needs at least one Bayesian group"));
    }

    // The gradcheck builds its own tiny model and random batch.
    let arch = ArchSpec::tiny();
    let mut rng = seeded_rng(resolved.config.seed, 0);
    let mut model: Model<f64> =
        Model::build(arch.clone(), resolved.placement.clone(), &mut rng)?;
    let (h, w, c) = arch.input_size;
    let batch = 4usize;
    use rand::Rng;
    let images = crate::Tensor::from_fn(vec![batch, c, h, w], |_| rng.gen::<f64>());
    let labels: Vec<usize> = (0..batch).map(|i| i % arch.num_classes).collect();

    let cfg = GradcheckConfig {
        tolerance: resolved.config.tolerance,
        scope,
        seed: resolved.config.seed,
        max_per_tensor: resolved.config.samples_per_tensor,
        ..GradcheckConfig::default()
    };
    let report = gradcheck_model(&mut model, &images, &labels, &cfg)?;
    for group in &report.groups {
        println!(
            "group={} family={} checked={} max_rel={:.3e} max_abs={:.3e} {}",
            group.name,
            group.family,
            group.checked,
            group.max_rel,
            group.max_abs,
            if group.within(report.tolerance) { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradcheck passed at tolerance {:.1e}", report.tolerance);
        Ok(0)
    } else {
        let worst = report.worst().expect("non-empty report");
        eprintln!(
            "gradcheck FAILED: worst group {} ({}) max_rel={:.3e} exceeds tolerance {:.1e}",
            worst.name, worst.family, worst.max_rel, report.tolerance
        );
        Ok(1)
    }
}
