mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "graphten",
    version,
    about = "Graph-based texture recognition: data, training, evaluation, gradient checks"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// key=value config file applied before flags.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Extra key=value override (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural texture dataset to PPM files.
    GenData(GenDataArgs),
    /// Train a model and write history, checkpoint and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Dump attention, adjacency, assignments and the descriptor for one image.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Comma-separated pattern names, one class each.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Train,val,test fractions.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Module set: fe, cag, mag or full.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fail on unreadable images (true) or skip them (false).
    #[arg(long)]
    strict: Option<bool>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run only the named check.
    #[arg(long)]
    op: Option<String>,
    /// Override the finite-difference step of every selected check.
    #[arg(long)]
    step: Option<f64>,
    /// Add a check with a deliberately wrong backward pass.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PPM image to run through the model.
    #[arg(long)]
    image: PathBuf,
}

fn config(global: &Global) -> graphten::Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &global.config {
        rc.load_file(p)?;
    }
    for pair in &global.sets {
        rc.set_pair(pair)?;
    }
    if let Some(seed) = global.seed {
        rc.data.seed = seed;
        rc.train.seed = seed;
    }
    if global.threads == 0 {
        return Err(graphten::Error::Config("--threads must be at least 1".into()));
    }
    rc.train.threads = global.threads;
    if let Some(out) = &global.out {
        rc.out = Some(out.clone());
    }
    Ok(rc)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut rc = config(&cli.global)?;
    let force = cli.global.force;
    match cli.command {
        Command::GenData(a) => {
            if let Some(v) = &a.classes {
                rc.set("data.classes", v)?;
            }
            if let Some(v) = a.per_class {
                rc.data.per_class = v;
            }
            if let Some(v) = a.size {
                rc.data.size = v;
            }
            if let Some(v) = &a.split {
                rc.set("data.split", v)?;
            }
            commands::gen_data(&rc, force)
        }
        Command::Train(a) => {
            if let Some(d) = a.data {
                rc.data_dir = Some(d);
            }
            if let Some(v) = &a.ablate {
                rc.model.set_ablation(v.parse()?);
            }
            if let Some(v) = a.epochs {
                rc.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                rc.train.batch_size = v;
            }
            if let Some(v) = a.lr {
                rc.train.lr = v;
            }
            if let Some(v) = a.strict {
                rc.strict = v;
            }
            commands::train(&rc, force)
        }
        Command::Eval(a) => {
            if let Some(d) = a.data {
                rc.data_dir = Some(d);
            }
            if let Some(c) = a.checkpoint {
                rc.checkpoint = Some(c);
            }
            commands::eval(&rc, &a.split, force)
        }
        Command::Gradcheck(a) => {
            let seed = cli.global.seed.unwrap_or(0);
            commands::gradcheck(a.op.as_deref(), a.step, a.inject_fault, seed)
        }
        Command::Inspect(a) => {
            if let Some(c) = a.checkpoint {
                rc.checkpoint = Some(c);
            }
            commands::inspect(&rc, &a.image, force)
        }
    }
}

/// 2 for usage and configuration problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<graphten::Error>() {
        Some(graphten::Error::Config(_)) => 2,
        _ => 1,
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
