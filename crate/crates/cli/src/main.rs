use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remix_core::bagstore::{dataset_stats, generate_synthetic_dataset, read_manifest};
use remix_core::budget::{bench_mode, bench_paired};
use remix_core::reducer::reduce_dataset;
use remix_core::trainer::{detect_representation, epoch_log_csv, evaluate, run_repeated, RepeatedReport};
use remix_core::{
    AugmentConfig, AugmentKind, BagManifest, CovarianceMode, Error, GatePolicy, LambdaPolicy, MilModel, ModelKind,
    ReduceConfig, Representation, SynthConfig, TrainConfig,
};

/// Prototype reduction, latent bag mixing and MIL training.
#[derive(Debug, Parser)]
#[command(name = "remix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic MIL dataset with known evidence instances.
    Synth(SynthArgs),
    /// Replace every bag with K-Means prototypes (and covariances).
    Reduce(ReduceArgs),
    /// Train (and evaluate) MIL models.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Compare training cost on full and reduced bags.
    Bench(BenchArgs),
    /// Run train + eval for each value of one parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Training bags per class.
    #[arg(long, default_value_t = 100)]
    bags: usize,
    /// Test bags per class (default: half of --bags).
    #[arg(long)]
    test_bags: Option<usize>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    min_instances: usize,
    #[arg(long, default_value_t = 800)]
    max_instances: usize,
    #[arg(long, default_value_t = 0.2)]
    evidence_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    std: f64,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Clone)]
struct ReduceFlags {
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Covariance kept per prototype (default: full when dim <= 256, else diag).
    #[arg(long)]
    cov: Option<CovarianceMode>,
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
}

#[derive(Debug, Args)]
struct ReduceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reduce: ReduceFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Clone)]
struct ModelFlags {
    #[arg(long, default_value = "abmil")]
    model: ModelKind,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Clone)]
struct AugFlags {
    #[arg(long, default_value = "none")]
    aug: AugmentKind,
    /// Mixing probability (default 0.5; 0.1 per pass for joint).
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value = "uniform")]
    lambda: LambdaPolicy,
    #[arg(long, default_value = "prototype")]
    gate: GatePolicy,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest (full or reduced bags).
    #[arg(long)]
    manifest: PathBuf,
    /// Test manifest (default: test.csv next to the training manifest).
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    aug: AugFlags,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 10)]
    runs: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Full-bag manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reduced-bag manifest with the same bag ids.
    #[arg(long)]
    reduced_manifest: Option<PathBuf>,
    /// Which representations to run.
    #[arg(long, default_value = "paired", value_parser = ["paired", "full", "reduced"])]
    mode: String,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_parser = ["k", "p", "epochs"])]
    param: String,
    /// Comma-separated values, run in the given order.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Training manifest. Must hold full bags when sweeping k.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Working directory for reduced bags and the result CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    reduce: ReduceFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    aug: AugFlags,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 10)]
    runs: usize,
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::MissingCovariance | Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CmdResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Reduce(a) => reduce(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn threads() -> CmdResult<Option<usize>> {
    match std::env::var("REMIX_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("REMIX_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_manifest(path: &Path) -> CmdResult<BagManifest> {
    if !path.exists() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    Ok(read_manifest(path).map_err(anyhow::Error::from)?)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        class_count: a.classes,
        dim: a.dim,
        train_bags_per_class: a.bags,
        test_bags_per_class: a.test_bags.unwrap_or(a.bags / 2),
        min_instances: a.min_instances,
        max_instances: a.max_instances,
        component_std: a.std,
        evidence_fraction: a.evidence_fraction,
        mean_separation: a.separation,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let out = generate_synthetic_dataset(&cfg, &a.out).map_err(anyhow::Error::from)?;
    for (name, m) in [("train", &out.train), ("test", &out.test)] {
        if m.is_empty() {
            continue;
        }
        let stats = dataset_stats(m).map_err(anyhow::Error::from)?;
        emit(&format!("{name}: {stats}\n"));
    }
    Ok(())
}

fn reduce_config(flags: &ReduceFlags, dim: usize, seed: u64) -> CmdResult<ReduceConfig> {
    let cfg = ReduceConfig {
        k: flags.k,
        covariance: flags.cov.unwrap_or_else(|| CovarianceMode::default_for_dim(dim)),
        max_iterations: flags.max_iter,
        restarts: flags.restarts,
        seed,
        normalize: flags.normalize,
        ..ReduceConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn reduce(a: ReduceArgs) -> CmdResult {
    // Validate flags before touching the input.
    reduce_config(&a.reduce, 1, a.seed)?;
    let threads = threads()?;
    let manifest = load_manifest(&a.manifest)?;
    let dim = manifest.dim().ok_or_else(|| usage("manifest lists no bags"))?;
    let cfg = reduce_config(&a.reduce, dim, a.seed)?;
    let reduced = reduce_dataset(&manifest, &cfg, &a.out, threads).map_err(anyhow::Error::from)?;
    let before = manifest.total_instances();
    let after = reduced.total_instances();
    emit(&format!(
        "reduced {} bags: {} instances -> {} prototypes, ratio {:.2}\n",
        reduced.len(),
        before,
        after,
        before as f64 / after as f64
    ));
    Ok(())
}

fn augment_config(flags: &AugFlags) -> CmdResult<AugmentConfig> {
    let mut cfg = AugmentConfig::new(flags.aug).with_lambda(flags.lambda);
    cfg.gate = flags.gate;
    if let Some(p) = flags.p {
        cfg = cfg.with_probability(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(model: &ModelFlags, aug: AugmentConfig, representation: Representation, runs: usize) -> CmdResult<TrainConfig> {
    let cfg = TrainConfig {
        model: model.model,
        hidden: model.hidden,
        epochs: model.epochs,
        lr: model.lr,
        augment: aug,
        representation,
        seed: model.seed,
        runs,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn test_manifest_path(train: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| train.parent().unwrap_or(Path::new(".")).join("test.csv"))
}

/// Loads a train/test pair and checks both hold the same representation.
fn load_pair(train: &Path, test: &Path) -> CmdResult<(BagManifest, BagManifest, Representation)> {
    let train_set = load_manifest(train)?;
    let test_set = load_manifest(test)?;
    let repr = detect_representation(&train_set).map_err(anyhow::Error::from)?;
    let test_repr = detect_representation(&test_set).map_err(anyhow::Error::from)?;
    if repr != test_repr {
        return Err(usage(format!("training bags are {repr} but test bags are {test_repr}")));
    }
    Ok((train_set, test_set, repr))
}

fn runs_csv(report: &RepeatedReport) -> String {
    let mut out = String::from("seed,precision,recall,accuracy,average\n");
    for r in &report.runs {
        let m = &r.report;
        out.push_str(&format!("{},{},{},{},{}\n", r.seed, m.precision, m.recall, m.accuracy, m.average));
    }
    out
}

fn train(a: TrainArgs) -> CmdResult {
    let aug = augment_config(&a.aug)?;
    train_config(&a.model, aug.clone(), Representation::Reduced, a.runs)?;
    let test_path = test_manifest_path(&a.manifest, a.test_manifest.as_ref());
    let (train_set, test_set, repr) = load_pair(&a.manifest, &test_path)?;
    if repr == Representation::Full && aug.kind != AugmentKind::None {
        return Err(usage(format!("--aug {} requires reduced bags", aug.kind)));
    }
    let cfg = train_config(&a.model, aug, repr, a.runs)?;
    let report = run_repeated(&train_set, &test_set, &cfg, a.runs)?;

    let first = &report.runs[0];
    create_dir(&a.out)?;
    first
        .outcome
        .model
        .save(a.out.join("model.rmxm"))
        .map_err(anyhow::Error::from)?;
    write(&a.out.join("epochs.csv"), epoch_log_csv(&first.outcome.logs))?;
    write(&a.out.join("runs.csv"), runs_csv(&report))?;
    let json = report.aggregate.to_json();
    write(&a.out.join("report.json"), format!("{json}\n"))?;
    emit(&format!("{json}\n"));
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    if !a.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let model = MilModel::load(&a.checkpoint).map_err(anyhow::Error::from)?;
    let manifest = load_manifest(&a.manifest)?;
    let repr = detect_representation(&manifest).map_err(anyhow::Error::from)?;
    let report = evaluate(&model, &manifest, repr).map_err(anyhow::Error::from)?;
    emit(&format!("{}\n", report.to_json()));
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let need = |path: &Option<PathBuf>, what: &str, flag: &str| -> CmdResult<BagManifest> {
        let path = path
            .as_ref()
            .ok_or_else(|| usage(format!("missing {what} representation: pass {flag}")))?;
        if !path.exists() {
            return Err(usage(format!("missing {what} representation: {} does not exist", path.display())));
        }
        let m = load_manifest(path)?;
        let expected = if what == "full-bag" { Representation::Full } else { Representation::Reduced };
        if detect_representation(&m).map_err(anyhow::Error::from)? != expected {
            return Err(usage(format!("{} does not hold {what} files", path.display())));
        }
        Ok(m)
    };
    let cfg = train_config(&a.model, AugmentConfig::none(), Representation::Full, 1)?;
    let json = match a.mode.as_str() {
        "full" => {
            let full = need(&a.manifest, "full-bag", "--manifest")?;
            serde_json::to_string_pretty(&bench_mode(&full, Representation::Full, &cfg)?)
        }
        "reduced" => {
            let reduced = need(&a.reduced_manifest, "reduced-bag", "--reduced-manifest")?;
            serde_json::to_string_pretty(&bench_mode(&reduced, Representation::Reduced, &cfg)?)
        }
        _ => {
            let full = need(&a.manifest, "full-bag", "--manifest")?;
            let reduced = need(&a.reduced_manifest, "reduced-bag", "--reduced-manifest")?;
            serde_json::to_string_pretty(&bench_paired(&full, &reduced, &cfg)?)
        }
    }
    .map_err(anyhow::Error::from)?;
    emit(&format!("{json}\n"));
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn sweep(a: SweepArgs) -> CmdResult {
    if a.values.is_empty() || a.values.iter().any(|v| v.trim().is_empty()) {
        return Err(usage("--values must list at least one value"));
    }
    let base_aug = augment_config(&a.aug)?;
    if a.param == "p" && base_aug.kind == AugmentKind::None {
        return Err(usage("sweeping p needs --aug other than none"));
    }
    // Parse every value up front so a typo fails before any work is done.
    let mut parsed = Vec::with_capacity(a.values.len());
    for raw in &a.values {
        let v = raw.trim();
        let ok = match a.param.as_str() {
            "k" | "epochs" => v.parse::<usize>().is_ok_and(|n| n > 0),
            _ => v.parse::<f64>().is_ok_and(|p| (0.0..=1.0).contains(&p)),
        };
        if !ok {
            return Err(usage(format!("invalid value {v:?} for --param {}", a.param)));
        }
        parsed.push(v.to_owned());
    }
    reduce_config(&a.reduce, 1, a.model.seed)?;
    train_config(&a.model, base_aug.clone(), Representation::Reduced, a.runs)?;
    let threads = threads()?;

    let test_path = test_manifest_path(&a.manifest, a.test_manifest.as_ref());
    let (train_set, test_set, repr) = load_pair(&a.manifest, &test_path)?;
    if a.param == "k" && repr != Representation::Full {
        return Err(usage("sweeping k needs full-bag manifests"));
    }
    let dim = train_set.dim().ok_or_else(|| usage("manifest lists no bags"))?;

    let reduce_into = |k: usize, dir: &Path| -> remix_core::Result<(BagManifest, BagManifest)> {
        let flags = ReduceFlags { k, ..a.reduce.clone() };
        let cfg = ReduceConfig {
            k,
            covariance: flags.cov.unwrap_or_else(|| CovarianceMode::default_for_dim(dim)),
            max_iterations: flags.max_iter,
            restarts: flags.restarts,
            seed: a.model.seed,
            normalize: flags.normalize,
            ..ReduceConfig::default()
        };
        Ok((
            reduce_dataset(&train_set, &cfg, dir, threads)?,
            reduce_dataset(&test_set, &cfg, dir, threads)?,
        ))
    };
    // Reduced artifacts are shared across p and epoch values.
    let shared = match (a.param.as_str(), repr) {
        ("k", _) => None,
        (_, Representation::Reduced) => Some((train_set.clone(), test_set.clone())),
        (_, Representation::Full) => Some(reduce_into(a.reduce.k, &a.out.join("reduced")).map_err(anyhow::Error::from)?),
    };

    let mut csv = String::from("value,average,error\n");
    emit(&csv);
    for value in &parsed {
        let result = (|| -> remix_core::Result<f64> {
            let mut aug = base_aug.clone();
            let mut model = a.model.clone();
            let (tr, te) = match a.param.as_str() {
                "k" => {
                    let k: usize = value.parse().expect("validated");
                    reduce_into(k, &a.out.join(format!("k{k}")))?
                }
                "p" => {
                    aug = aug.with_probability(value.parse().expect("validated"));
                    shared.clone().expect("shared reduction")
                }
                _ => {
                    model.epochs = value.parse().expect("validated");
                    shared.clone().expect("shared reduction")
                }
            };
            let cfg = TrainConfig {
                model: model.model,
                hidden: model.hidden,
                epochs: model.epochs,
                lr: model.lr,
                augment: aug,
                representation: Representation::Reduced,
                seed: model.seed,
                runs: a.runs,
            };
            Ok(run_repeated(&tr, &te, &cfg, a.runs)?.aggregate.average)
        })();
        let row = match result {
            Ok(avg) => format!("{value},{avg},\n"),
            Err(e) => {
                eprintln!("warning: {} = {value}: {e}", a.param);
                format!("{value},,{}\n", csv_field(&e.to_string()))
            }
        };
        emit(&row);
        csv.push_str(&row);
    }
    write(&a.out.join("sweep.csv"), csv)?;
    Ok(())
}
