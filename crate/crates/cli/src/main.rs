use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use prunable::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use prunable::config::RunConfig;
use prunable::data::Dataset;
use prunable::export::{self, export_coo, import_coo, structured_masks};
use prunable::model::PrunableModel;
use prunable::retrieval::{self, EmbeddingSet, Metric};
use prunable::study::osp_vs_ip;
use prunable::trainer::{adaptive_bn_recalibrate, recalibrate_with_masks, train, TrainConfig};
use prunable::Error;

/// Train, prune and evaluate networks whose nested subnetworks share weights.
#[derive(Debug, Parser)]
#[command(name = "prunable", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a config and write a checkpoint.
    Train(TrainArgs),
    /// Recompute batch-norm statistics for capacities in a checkpoint.
    Recalibrate(RecalibrateArgs),
    /// Extract one subnetwork as a sparse (COO) artifact.
    Prune(PruneArgs),
    /// Self-test / cross-test retrieval table for a checkpoint or an artifact.
    Eval(EvalArgs),
    /// One-shot versus iterative score-only pruning with frozen weights.
    OspVsIp(StudyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step losses, conflicts and gradient magnitudes as JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecalibrateArgs {
    /// Data source; defaults to the config stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    capacities: Vec<f64>,
    /// Output checkpoint; defaults to overwriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    capacity: f64,
    /// Prune whole convolution kernels instead of single connections.
    #[arg(long)]
    structured: bool,
    /// Use the statistics already stored in the checkpoint.
    #[arg(long)]
    no_recalibrate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "artifact", required_unless_present = "artifact")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Defaults to 1.0 followed by the trained capacities.
    #[arg(long, value_delimiter = ',')]
    capacities: Vec<f64>,
    /// `map` or `recall@K`.
    #[arg(long, default_value = "map")]
    metric: String,
    /// Table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `study_seeds` with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_) | Error::Nesting { .. }) => EXIT_NUMERIC,
        Some(Error::Config { .. } | Error::InvalidArgument(_) | Error::Capacity(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Recalibrate(a) => cmd_recalibrate(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::OspVsIp(a) => cmd_osp_vs_ip(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))
}

/// The explicit config, or the one recorded in the checkpoint (relative
/// paths then resolve against the working directory). The seed is always the
/// checkpoint's.
fn config_or_embedded(path: Option<&Path>, meta: &CheckpointMeta) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::parse(&meta.config, Path::new(".")).context("config stored in checkpoint")?,
    };
    cfg.train.seed = meta.seed;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> anyhow::Result<(PrunableModel, CheckpointMeta)> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset)> {
    cfg.data.load().context("loading dataset")
}

fn calibration_set(train: &Dataset, cfg: &TrainConfig) -> anyhow::Result<Dataset> {
    Ok(train.sample_fraction(cfg.calibration_fraction, cfg.seed)?)
}

fn check_capacity(c: f64) -> anyhow::Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Capacity(c).into());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let (train_set, _) = load_data(&cfg)?;
    let arch = cfg.model.arch_for(&train_set)?;
    let mut model = PrunableModel::init(&arch, cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} items, losses at capacities {:?}",
        model.params().iter().map(|p| p.len()).sum::<usize>(),
        train_set.len(),
        cfg.train.loss_capacities()
    );
    let report = train(&mut model, &train_set, &cfg.train)?;
    if let Some(path) = &args.report {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for step in &report.steps {
            serde_json::to_writer(&mut out, step)?;
            writeln!(out)?;
        }
        out.flush()?;
    }
    let meta = CheckpointMeta {
        config: cfg.text.clone(),
        seed: cfg.train.seed,
        steps: report.steps.len() as u64,
    };
    save_checkpoint(&model, &meta, &args.out)?;
    log::info!("wrote {} after {} steps", args.out.display(), meta.steps);
    Ok(())
}

fn cmd_recalibrate(args: RecalibrateArgs) -> anyhow::Result<()> {
    for &c in &args.capacities {
        check_capacity(c)?;
    }
    let (mut model, meta) = read_checkpoint(&args.checkpoint)?;
    let cfg = config_or_embedded(args.config.as_deref(), &meta)?;
    let (train_set, _) = load_data(&cfg)?;
    let calibration = calibration_set(&train_set, &cfg.train)?;
    for &c in &args.capacities {
        adaptive_bn_recalibrate(&mut model, c, &calibration, cfg.train.batch_size)?;
        log::info!("recalibrated capacity {c} on {} items", calibration.len());
    }
    let out = args.out.as_ref().unwrap_or(&args.checkpoint);
    save_checkpoint(&model, &meta, out)?;
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> anyhow::Result<()> {
    check_capacity(args.capacity)?;
    let (mut model, meta) = read_checkpoint(&args.checkpoint)?;
    if args.structured && !model.arch.has_conv() {
        bail!(Error::InvalidArgument(
            "--structured needs at least one convolutional layer".into()
        ));
    }
    if !args.no_recalibrate && model.has_batch_norm() {
        let cfg = config_or_embedded(args.config.as_deref(), &meta)?;
        let (train_set, _) = load_data(&cfg)?;
        let calibration = calibration_set(&train_set, &cfg.train)?;
        let masks = if args.structured {
            structured_masks(&model, args.capacity)?
        } else {
            model.masks(args.capacity)?
        };
        recalibrate_with_masks(&mut model, args.capacity, &masks, &calibration, cfg.train.batch_size)?;
    }
    let sub = if args.structured {
        export::structured_prune(&model, args.capacity)?
    } else {
        export::prune(&model, args.capacity)?
    };
    export_coo(&sub, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&sub.storage_report())?);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let metric: Metric = args.metric.parse()?;
    for &c in &args.capacities {
        check_capacity(c)?;
    }
    let table = if let Some(path) = &args.artifact {
        let sub = import_coo(path).with_context(|| format!("reading artifact {}", path.display()))?;
        if args.capacities.iter().any(|&c| c != sub.capacity) {
            bail!(Error::InvalidArgument(format!(
                "artifact holds only capacity {}",
                sub.capacity
            )));
        }
        let cfg = load_config(
            args.config
                .as_deref()
                .ok_or_else(|| anyhow!(Error::InvalidArgument("--artifact needs --config".into())))?,
        )?;
        let (_, test) = load_data(&cfg)?;
        let (emb, _) = sub.infer(test.images())?;
        let set = EmbeddingSet::new(&emb, test.labels().to_vec(), sub.capacity)?;
        retrieval::eval_matrix(std::slice::from_ref(&set), std::slice::from_ref(&set), metric)?
    } else {
        let path = args.checkpoint.as_ref().expect("enforced by clap");
        let (model, meta) = read_checkpoint(path)?;
        let cfg = config_or_embedded(args.config.as_deref(), &meta)?;
        let (_, test) = load_data(&cfg)?;
        let capacities = if args.capacities.is_empty() {
            let mut caps = vec![1.0];
            caps.extend(cfg.train.capacities.iter().filter(|&&c| c < 1.0));
            caps
        } else {
            args.capacities.clone()
        };
        retrieval::cross_test_matrix(&model, &capacities, &test, &test, metric)?
    };
    print_table(&table);
    if let Some(out) = &args.out {
        table.write_json(out)?;
    }
    Ok(())
}

fn print_table(table: &retrieval::EvalMatrix) {
    let mut line = format!("{:>10}", format!("q\\g {}", table.metric));
    for c in &table.capacities {
        line += &format!(" {c:>8.3}");
    }
    println!("{line}");
    for (c, row) in table.capacities.iter().zip(&table.grid) {
        let mut line = format!("{c:>10.3}");
        for v in row {
            line += &format!(" {v:>8.4}");
        }
        println!("{line}");
    }
}

fn cmd_osp_vs_ip(args: StudyArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.study.seeds = vec![seed];
    }
    let (train_set, test) = load_data(&cfg)?;
    let arch = cfg.model.arch_for(&train_set)?;
    let report = osp_vs_ip(&arch, &train_set, &test, &cfg.train, &cfg.study)?;
    println!("{:>8} {:>18} {:>18}", "capacity", "one-shot", "iterative");
    for row in &report.rows {
        println!(
            "{:>8.2} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
            row.capacity, row.one_shot.mean, row.one_shot.std, row.iterative.mean, row.iterative.std
        );
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}
