//! `concept-moe`: data generation, two-stage training, explanation and
//! ablation runs. Every command that writes files writes only inside its
//! `--out` target, and records a manifest there before heavy work starts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concept_moe::explain::{
    ablation_curve, importance_table, partition_overlay, partition_purity, AblationMode, Mechanism,
};
use concept_moe::gradsuite;
use concept_moe::moe::MoeModel;
use concept_moe::partition::PartitionModel;
use concept_moe::pipeline::{concept_features, evaluate, Checkpoint, MoeTrainer, PartitionTrainer, Stage, TrainConfig};
use concept_moe::rng::{derive_seed, stream};
use concept_moe::synthdata::{generate, read_dataset, write_dataset, SynthSample, SynthSpec};
use concept_moe::Error;
use sha2::{Digest, Sha256};

const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
const MANIFEST: &str = "manifest.txt";

const EXIT_OTHER: u8 = 1;
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "concept-moe", version = VERSION, about = "Concept partition and mixture-of-experts recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Stage 1: train the concept partition model.
    TrainPartition(TrainPartition),
    /// Stage 2: train experts and gate on a frozen partition model.
    TrainMoe(TrainMoe),
    /// Importance table, purity report and partition overlays.
    Explain(Explain),
    /// Accuracy as concepts are added or removed in importance order.
    Ablate(Ablate),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(Gradcheck),
    /// Test accuracy of a trained model.
    Eval(Eval),
}

#[derive(Clone, Copy, ValueEnum)]
enum SpecName {
    Default,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "default")]
    spec: SpecName,
    /// Number of samples.
    #[arg(long, default_value_t = 2048)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// The test split draws from a stream derived from the seed.
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// Dataset file to write; the manifest goes to `<out>.manifest.txt`.
    #[arg(long)]
    out: PathBuf,
}

/// Training hyper-parameters; each flag overrides the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "learning_rate", visible_alias = "learning-rate", value_name = "F64")]
    learning_rate: Option<String>,
    #[arg(long, value_name = "F64")]
    momentum: Option<String>,
    #[arg(long = "weight_decay", visible_alias = "weight-decay", value_name = "F64")]
    weight_decay: Option<String>,
    #[arg(long, value_name = "F64")]
    gamma: Option<String>,
    #[arg(long = "num_concepts", visible_alias = "num-concepts", value_name = "USIZE")]
    num_concepts: Option<String>,
    #[arg(long, value_name = "USIZE")]
    epochs: Option<String>,
    #[arg(long = "batch_size", visible_alias = "batch-size", value_name = "USIZE")]
    batch_size: Option<String>,
    #[arg(long = "lambda_r", visible_alias = "lambda-r", value_name = "F64")]
    lambda_r: Option<String>,
    #[arg(long, value_name = "U64")]
    seed: Option<String>,
}

#[derive(Args)]
struct TrainPartition {
    /// Training dataset file.
    #[arg(long)]
    train: PathBuf,
    /// Continue from a stage-1 checkpoint until `epochs` are done.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainMoe {
    #[arg(long)]
    train: PathBuf,
    /// Stage-1 checkpoint to freeze.
    #[arg(long, required_unless_present = "resume")]
    partition: Option<PathBuf>,
    /// Continue from a stage-2 checkpoint until `epochs` are done.
    #[arg(long, conflicts_with = "partition")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Explain {
    /// Stage-2 checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of samples to render as PPM overlays.
    #[arg(long, default_value_t = 4)]
    overlays: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Add,
    Remove,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    /// Zero the disabled concepts' feature rows.
    Zero,
    /// Occlude the image slots the disabled concepts map to.
    Occlude,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "zero")]
    mechanism: MechanismArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// Seeds 0..N per case.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Pass threshold on the relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
            _ => EXIT_OTHER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(fail(EXIT_MISSING_FILE, format!("no such file: {}", path.display())))
    }
}

fn resolve_config(base: TrainConfig, flags: &ConfigFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = &flags.config {
        require_file(path)?;
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    let overrides = [
        ("learning_rate", &flags.learning_rate),
        ("momentum", &flags.momentum),
        ("weight_decay", &flags.weight_decay),
        ("gamma", &flags.gamma),
        ("num_concepts", &flags.num_concepts),
        ("epochs", &flags.epochs),
        ("batch_size", &flags.batch_size),
        ("lambda_r", &flags.lambda_r),
        ("seed", &flags.seed),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Record of one invocation, written before the run starts.
struct RunManifest {
    command_line: String,
    config_sha256: Option<String>,
    seed: u64,
    artifacts: Vec<String>,
}

impl RunManifest {
    fn new(seed: u64, config: Option<&TrainConfig>, artifacts: &[&str]) -> Self {
        Self {
            command_line: std::iter::once("concept-moe".to_owned())
                .chain(std::env::args().skip(1))
                .collect::<Vec<_>>()
                .join(" "),
            config_sha256: config.map(|c| {
                Sha256::digest(c.to_text().as_bytes())
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect()
            }),
            seed,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version = {VERSION}");
        let _ = writeln!(out, "command = {}", self.command_line);
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(h) = &self.config_sha256 {
            let _ = writeln!(out, "config_sha256 = {h}");
        }
        let _ = writeln!(out, "artifacts = {}", self.artifacts.join(", "));
        out
    }
}

/// Creates the run directory and writes its manifest.
fn start_run(out: &Path, manifest: &RunManifest) -> CmdResult {
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST), manifest.to_text())?;
    Ok(())
}

/// Writes via a temporary sibling so a crash never leaves a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<SynthSample>, Failure> {
    require_file(path)?;
    let data = read_dataset(path)?;
    if data.is_empty() {
        return Err(fail(EXIT_OTHER, format!("{} holds no samples", path.display())));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?)
}

fn load_models(path: &Path) -> Result<(PartitionModel, MoeModel, TrainConfig), Failure> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.stage != Stage::Moe {
        return Err(fail(
            EXIT_OTHER,
            format!("{} is a stage-1 checkpoint; train-moe first", path.display()),
        ));
    }
    let t = MoeTrainer::from_checkpoint(&ckpt)?;
    let config = t.config().clone();
    let (p, m) = t.into_models();
    Ok((p, m, config))
}

fn gen_data(args: &GenData) -> CmdResult {
    let SpecName::Default = args.spec;
    let seed = match args.split {
        Split::Train => args.seed,
        Split::Test => derive_seed(args.seed, stream::TEST_DATA),
    };
    let spec = SynthSpec::reference(seed);
    let name = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest_path = PathBuf::from(format!("{}.manifest.txt", args.out.display()));
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&manifest_path, RunManifest::new(args.seed, None, &[&name]).to_text())?;
    let samples = generate(&spec, args.n)?;
    write_dataset(&samples, &args.out)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn train_partition_cmd(args: &TrainPartition) -> CmdResult {
    let data = load_data(&args.train)?;
    let num_classes = data.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.stage != Stage::Partition {
                return Err(fail(EXIT_OTHER, "resume needs a stage-1 checkpoint"));
            }
            let mut ckpt = ckpt;
            ckpt.config = resolve_config(ckpt.config.clone(), &args.flags)?;
            PartitionTrainer::from_checkpoint(&ckpt)?
        }
        None => PartitionTrainer::new(resolve_config(TrainConfig::default(), &args.flags)?, num_classes)?,
    };
    let cfg = trainer.config().clone();
    start_run(
        &args.out,
        &RunManifest::new(
            cfg.seed,
            Some(&cfg),
            &["partition.ckpt", "partition_metrics.csv", "config.txt"],
        ),
    )?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    while trainer.epochs_done() < cfg.epochs {
        let m = trainer.run_epoch(&data)?;
        eprintln!(
            "partition epoch {}/{}: loss {:.5} l_cls {:.5} l_r {:.5} acc {:.4}",
            m.epoch, cfg.epochs, m.loss, m.primary, m.secondary, m.accuracy
        );
        write_atomic(&args.out.join("partition.ckpt"), &trainer.checkpoint().to_bytes())?;
        write_atomic(
            &args.out.join("partition_metrics.csv"),
            trainer.metrics_csv().as_bytes(),
        )?;
    }
    write_atomic(&args.out.join("partition.ckpt"), &trainer.checkpoint().to_bytes())?;
    write_atomic(
        &args.out.join("partition_metrics.csv"),
        trainer.metrics_csv().as_bytes(),
    )?;
    Ok(())
}

fn train_moe_cmd(args: &TrainMoe) -> CmdResult {
    let data = load_data(&args.train)?;
    let (mut trainer, partition_log) = match (&args.resume, &args.partition) {
        (Some(path), _) => {
            let mut ckpt = load_checkpoint(path)?;
            if ckpt.stage != Stage::Moe {
                return Err(fail(EXIT_OTHER, "resume needs a stage-2 checkpoint"));
            }
            ckpt.config = resolve_config(ckpt.config.clone(), &args.flags)?;
            (MoeTrainer::from_checkpoint(&ckpt)?, ckpt.partition_log)
        }
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let partition = PartitionTrainer::from_checkpoint(&ckpt)?.into_model();
            // stage 2 starts from the stage-1 settings; flags and file override
            let cfg = resolve_config(ckpt.config.clone(), &args.flags)?;
            (MoeTrainer::new(cfg, partition)?, ckpt.partition_log)
        }
        (None, None) => return Err(fail(EXIT_OTHER, "need --partition or --resume")),
    };
    let cfg = trainer.config().clone();
    start_run(
        &args.out,
        &RunManifest::new(cfg.seed, Some(&cfg), &["moe.ckpt", "moe_metrics.csv", "config.txt"]),
    )?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let z = concept_features(trainer.partition(), &data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    while trainer.epochs_done() < cfg.epochs {
        let m = trainer.run_epoch(&z, &labels)?;
        eprintln!(
            "moe epoch {}/{}: loss {:.5} l_ept {:.5} l_g {:.5} acc {:.4}",
            m.epoch, cfg.epochs, m.loss, m.primary, m.secondary, m.accuracy
        );
        write_atomic(
            &args.out.join("moe.ckpt"),
            &trainer.checkpoint(&partition_log).to_bytes(),
        )?;
        write_atomic(&args.out.join("moe_metrics.csv"), trainer.metrics_csv().as_bytes())?;
    }
    write_atomic(
        &args.out.join("moe.ckpt"),
        &trainer.checkpoint(&partition_log).to_bytes(),
    )?;
    write_atomic(&args.out.join("moe_metrics.csv"), trainer.metrics_csv().as_bytes())?;
    Ok(())
}

fn explain_cmd(args: &Explain) -> CmdResult {
    let (partition, moe, cfg) = load_models(&args.model)?;
    let data = load_data(&args.data)?;
    let shown = args.overlays.min(data.len());
    let mut artifacts = vec!["importance.csv".to_owned(), "purity.csv".to_owned()];
    artifacts.extend((0..shown).map(|i| format!("overlay_{i}.ppm")));
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    start_run(&args.out, &RunManifest::new(cfg.seed, Some(&cfg), &names))?;

    let report = importance_table(&partition, &moe, &data, cfg.gamma)?;
    fs::write(args.out.join("importance.csv"), report.to_csv())?;
    let purity = partition_purity(&partition, &data)?;
    fs::write(args.out.join("purity.csv"), purity.to_csv())?;
    for (i, sample) in data.iter().take(shown).enumerate() {
        fs::write(
            args.out.join(format!("overlay_{i}.ppm")),
            partition_overlay(&partition, sample)?.to_ppm(),
        )?;
    }
    println!("purity {:.4}", purity.purity);
    for (rank, &j) in report.ranking.iter().enumerate() {
        println!("rank {rank}: concept {j} weight {:.6}", report.averages[j]);
    }
    Ok(())
}

fn ablate_cmd(args: &Ablate) -> CmdResult {
    let (partition, moe, cfg) = load_models(&args.model)?;
    let data = load_data(&args.data)?;
    let (mode, file) = match args.mode {
        ModeArg::Add => (AblationMode::Add, "ablation_add.csv"),
        ModeArg::Remove => (AblationMode::Remove, "ablation_remove.csv"),
    };
    let mechanism = match args.mechanism {
        MechanismArg::Zero => Mechanism::ZeroConceptFeatures,
        MechanismArg::Occlude => Mechanism::OccludeInput,
    };
    start_run(&args.out, &RunManifest::new(cfg.seed, Some(&cfg), &[file]))?;
    let report = importance_table(&partition, &moe, &data, cfg.gamma)?;
    let curve = ablation_curve(&partition, &moe, &data, &report, mode, mechanism)?;
    fs::write(args.out.join(file), curve.to_csv())?;
    print!("{}", curve.to_csv());
    Ok(())
}

fn gradcheck_cmd(args: &Gradcheck) -> CmdResult {
    let mut worst = 0.0f64;
    for case in gradsuite::cases() {
        let r = gradsuite::run_case(&case, 0..args.seeds)?;
        let err = r.result.max_rel_err;
        worst = worst.max(err);
        println!(
            "{:<24} max_rel_err {err:.3e} ({} derivatives) {}",
            r.name,
            r.result.evaluated,
            if err < args.tolerance { "ok" } else { "FAIL" }
        );
    }
    println!("worst {worst:.3e}, tolerance {:e}", args.tolerance);
    if worst < args.tolerance {
        Ok(())
    } else {
        Err(fail(EXIT_OTHER, "gradient check above tolerance"))
    }
}

fn eval_cmd(args: &Eval) -> CmdResult {
    let (partition, moe, _) = load_models(&args.model)?;
    let data = load_data(&args.data)?;
    println!("accuracy {:.6}", evaluate(&partition, &moe, &data)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainPartition(a) => train_partition_cmd(a),
        Command::TrainMoe(a) => train_moe_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
