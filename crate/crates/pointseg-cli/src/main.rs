mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, SplitChoice};

#[derive(Parser, Debug)]
#[command(name = "pointseg", version)]
#[command(about = "LiDAR road-object segmentation: spherical projection, \
                   training, inference, evaluation, and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project a raw LiDAR scan into a spherical frame array plus a range
    /// preview image
    Project(ProjectArgs),
    /// Train a model on a directory of frame arrays
    Train(TrainArgs),
    /// Run a checkpoint on a frame or scan, writing a class map image and a
    /// labeled point cloud
    Infer(InferArgs),
    /// Evaluate a checkpoint over a dataset split
    Eval(EvalArgs),
    /// Time every pipeline stage over repeated runs
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Plain key=value config file; flags take precedence over its entries
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random stream [default: 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for kernel-internal parallelism; falls back to the
    /// POINTSEG_THREADS environment variable [default: all cores]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Input scan (.bin, packed x/y/z/intensity f32 records)
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,

    /// Output frame array (.npy); the preview image lands next to it
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Dataset directory of frame arrays (.npy)
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,

    /// Output checkpoint path; the loss CSV lands next to it [default: model.pseg]
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,

    /// Optimization steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,

    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f32>,

    /// Frames per batch [default: 32]
    #[arg(long)]
    batch: Option<usize>,

    /// Log the loss every N steps; the first and last step always log
    /// [default: 10]
    #[arg(long)]
    log_every: Option<usize>,

    /// Divide every channel width by this factor for a smaller model
    /// [default: 1]
    #[arg(long)]
    model_scale: Option<usize>,

    /// Per-class loss weights as four comma-separated values
    /// [default: 1.0,4.0,4.0,4.0]
    #[arg(long, value_name = "W0,W1,W2,W3")]
    class_weights: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Input frame array (.npy) or raw scan (.bin)
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,

    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Output directory for class_map.ppm and labeled_cloud.txt
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Fit a ground plane and demote foreground points on it [default: off]
    #[arg(long)]
    ransac: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Dataset directory of frame arrays (.npy)
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,

    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Output directory for report.txt and report.csv
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Which split to evaluate [default: val]
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Input frame array (.npy) or raw scan (.bin)
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,

    /// Checkpoint to benchmark
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Timed iterations after the 10-iteration warmup [default: 50]
    #[arg(long)]
    iterations: Option<usize>,

    /// Also write the timing CSV to this file [default: stdout only]
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    configure_threads(cfg.threads);
    match cli.command {
        Command::Project(_) => commands::project(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Infer(_) => commands::infer(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Bench(_) => commands::bench(&cfg, &mut std::io::stdout()),
    }
}

/// Merges defaults, the config file, and explicit flags, in that order.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let common = match &cli.command {
        Command::Project(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Infer(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Bench(a) => &a.common,
    };

    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let entries = config::read_config_file(path)?;
        config::apply_config_file(&mut cfg, &entries)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("POINTSEG_THREADS") {
            cfg.threads = Some(
                v.parse()
                    .map_err(|_| anyhow::anyhow!("POINTSEG_THREADS={v:?} is not a thread count"))?,
            );
        }
    }
    cfg.ransac_config.seed = cfg.seed;

    match &cli.command {
        Command::Project(a) => {
            cfg.input = a.input.clone().or(cfg.input);
            cfg.output = a.output.clone().or(cfg.output);
        }
        Command::Train(a) => {
            cfg.input = a.input.clone().or(cfg.input);
            cfg.output = a.output.clone().or(cfg.output);
            if let Some(v) = a.steps {
                cfg.steps = v;
            }
            if let Some(v) = a.lr {
                cfg.lr = v;
            }
            if let Some(v) = a.batch {
                cfg.batch = v;
            }
            if let Some(v) = a.log_every {
                cfg.log_every = v;
            }
            if let Some(v) = a.model_scale {
                cfg.model_scale = v;
            }
            if let Some(s) = &a.class_weights {
                cfg.class_weights = config::parse_class_weights(s)?;
            }
        }
        Command::Infer(a) => {
            cfg.input = a.input.clone().or(cfg.input);
            cfg.output = a.output.clone().or(cfg.output);
            cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
            if a.ransac {
                cfg.ransac = true;
            }
        }
        Command::Eval(a) => {
            cfg.input = a.input.clone().or(cfg.input);
            cfg.output = a.output.clone().or(cfg.output);
            cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
            if let Some(v) = a.split {
                cfg.split = v;
            }
        }
        Command::Bench(a) => {
            cfg.input = a.input.clone().or(cfg.input);
            cfg.output = a.output.clone().or(cfg.output);
            cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
            if let Some(v) = a.iterations {
                cfg.iterations = v;
            }
        }
    }
    Ok(cfg)
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // A second build_global in the same process is harmless; the first
        // pool wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// 2 for data/shape/config/io problems, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pointseg::Error>() {
            return match e {
                pointseg::Error::Numeric(_) | pointseg::Error::Degenerate(_) => 3,
                _ => 2,
            };
        }
    }
    2
}
