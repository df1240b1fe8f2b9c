use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use binas_core::backend::SupernetBackend;
use binas_core::config::{parse_binarize, RunConfig};
use binas_core::data::{load_dataset, Dataset};
use binas_core::persist::{load_model, save_model, write_atomic, SearchCheckpoint, CHECKPOINT_VERSION};
use binas_core::rng::{SeedSplitter, Stream};
use binas_core::search::{size_trajectory, SearchBackend, SearchDriver};
use binas_core::space::init_space;
use binas_core::train::{evaluate, train_final};
use binas_core::{CellType, Error, Genotype, Result};

const OUTPUT_ENV: &str = "BINAS_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "binas", version, about = "Binarized architecture search with operation abandoning")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell genotype.
    Search(SearchArgs),
    /// Train the network stacked from a genotype.
    Train(TrainArgs),
    /// Evaluate a trained model file.
    Eval(EvalArgs),
    /// Write Graphviz files for a genotype.
    ExportDot(DotArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Dataset directory (or CIFAR-10 batch file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// none, xnor or pcnn-amp.
    #[arg(long)]
    binarize: Option<String>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop cleanly after this many units of work (epochs) in total.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Run binarized convolutions on the bit-packed kernels.
    #[arg(long)]
    packed: bool,
}

#[derive(Args)]
struct DotArgs {
    #[arg(long)]
    genotype: PathBuf,
    /// Directory for genotype.dot, normal.dot and reduce.dot; prints the
    /// combined graph when absent.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::State(_) => 1,
        Error::Parse { .. } | Error::Io(_) | Error::Dimension(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &c.data {
        cfg.data.path = d.clone();
    }
    if let Some(b) = &c.binarize {
        cfg.binarize.mode = parse_binarize(b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    let d = load_dataset(&cfg.data.path, cfg.data.format, split)?;
    let limit = if split == "train" { cfg.data.train_limit } else { cfg.data.test_limit };
    Ok(if limit > 0 { d.truncate(limit) } else { d })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_lines<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::State(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn write_dots(dir: &Path, g: &Genotype) -> Result<()> {
    write_atomic(&dir.join("genotype.dot"), g.to_dot().as_bytes())?;
    write_atomic(&dir.join("normal.dot"), g.cell_dot(CellType::Normal).as_bytes())?;
    write_atomic(&dir.join("reduce.dot"), g.cell_dot(CellType::Reduction).as_bytes())
}

fn search(args: SearchArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let out = cfg.output_dir.clone();
    let data = load_split(&cfg, "train")?;
    let seeds = SeedSplitter::new(cfg.seed);
    let initial = init_space(cfg.space.nodes, cfg.space.operations, &mut seeds.rng(Stream::Alpha, 0))?;
    let initial_size = initial.space_size();
    let mut backend = SupernetBackend::new(
        &cfg.supernet,
        cfg.optimizer.clone(),
        cfg.search.reduction_batch,
        cfg.search.validation_fraction,
        &data,
        &initial,
        cfg.binarize_config(),
        cfg.seed,
    )?;
    let fingerprint = cfg.search_fingerprint();
    let mut driver = match &args.resume {
        Some(path) => {
            let ck = SearchCheckpoint::load(path)?;
            if ck.fingerprint != fingerprint {
                return Err(Error::State(format!("{} was written with a different configuration", path.display())));
            }
            backend.restore(ck.backend)?;
            eprintln!("resuming at unit {}/{}", ck.state.units_done, ck.state.total_units);
            SearchDriver::resume(cfg.search.clone(), cfg.seed, ck.state)?
        }
        None => SearchDriver::new(cfg.search.clone(), cfg.seed, initial)?,
    };
    std::fs::create_dir_all(&out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ckpt = out.join("checkpoint.json");
    let started = Instant::now();
    let mut reported = driver.state.report.len();
    loop {
        let more = driver.step(&mut backend)?;
        SearchCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: cfg.seed,
            fingerprint: fingerprint.clone(),
            state: driver.state.clone(),
            backend: backend.snapshot()?,
        }
        .save(&ckpt)?;
        let s = &driver.state;
        if s.report.len() != reported {
            reported = s.report.len();
            let r = s.report.last().expect("record");
            eprintln!("iteration {} K={} space={} subnets={} {:.1}s", r.iteration, r.k, r.space_size, r.subnets_trained, r.seconds);
            write_lines(&out.join("search_report.jsonl"), &s.report)?;
        } else {
            eprintln!("unit {}/{} {:?}", s.units_done, s.total_units, s.phase);
        }
        if !more {
            break;
        }
        if args.stop_after.is_some_and(|n| s.units_done >= n) {
            eprintln!("stopped after {} units; resume with --resume {}", s.units_done, ckpt.display());
            return Ok(());
        }
    }
    let outcome = driver.outcome()?;
    write_lines(&out.join("search_report.jsonl"), &outcome.report)?;
    write_atomic(&out.join("genotype.txt"), outcome.genotype.to_text().as_bytes())?;
    write_dots(&out, &outcome.genotype)?;
    let trajectory: Vec<String> = size_trajectory(&initial_size, &outcome.report).iter().map(|s| s.to_string()).collect();
    write_json(
        &out.join("search_summary.json"),
        &serde_json::json!({
            "iterations": outcome.report.len(),
            "subnets_trained": driver.state.subnets_trained,
            "units": driver.state.units_done,
            "space_size": trajectory,
            "seconds_this_run": started.elapsed().as_secs_f64(),
            "genotype": outcome.genotype.to_text(),
        }),
    )?;
    print!("{}", outcome.genotype.to_text());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.validate()?;
    }
    let genotype = Genotype::parse(&std::fs::read_to_string(&args.genotype)?)?;
    let train_set = load_split(&cfg, "train")?;
    let test_set = load_split(&cfg, "test")?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let binarize = cfg.binarize_config();
    let outcome = train_final(&genotype, &cfg.train, binarize, &train_set, &test_set, cfg.seed, &mut |m| {
        eprintln!(
            "epoch {} lr {:.5} train loss {:.4} acc {:.4} val loss {:.4} acc {:.4} ({:.1}s)",
            m.epoch, m.lr, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy, m.seconds
        );
    })?;
    let header = save_model(&outcome.model, &out.join("model.bin"))?;
    write_lines(&out.join("train_metrics.jsonl"), &outcome.metrics)?;
    let last = outcome.metrics.last().expect("at least one epoch");
    let summary = serde_json::json!({
        "binarize": binarize,
        "parameters": outcome.model.param_count(),
        "conv_weight_bytes": header.conv_weight_bytes(),
        "epochs": outcome.metrics.len(),
        "train_accuracy": last.train_accuracy,
        "val_accuracy": last.val_accuracy,
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("json"));
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let (_, mut model) = load_model(&args.model)?;
    let test_set = load_split(&cfg, "test")?;
    let r = evaluate(&mut model, &test_set, cfg.train.eval_batch, args.packed)?;
    println!("{}", serde_json::json!({ "images": test_set.len(), "loss": r.loss, "accuracy": r.accuracy }));
    Ok(())
}

fn export_dot(args: DotArgs) -> Result<()> {
    let g = Genotype::parse(&std::fs::read_to_string(&args.genotype)?)?;
    match args.output_dir {
        Some(dir) => write_dots(&dir, &g),
        None => {
            print!("{}", g.to_dot());
            Ok(())
        }
    }
}

/// `--threads` wins over the `threads` key of the config file.
fn configure_threads(cli: &Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Search(a) => Some(&a.common),
        Command::Train(a) => Some(&a.common),
        Command::Eval(a) => Some(&a.common),
        Command::ExportDot(_) => None,
    };
    let from_file = match common.and_then(|c| c.config.as_deref()) {
        Some(p) => RunConfig::load(p)?.threads,
        None => None,
    };
    match cli.threads.or(from_file) {
        Some(0) => Err(Error::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::State(e.to_string())),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads(&cli).and_then(|()| match cli.command {
        Command::Search(a) => search(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportDot(a) => export_dot(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
