use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elecmap::pipeline::{Pipeline, PipelineConfig, Stage, StageOutcome};
use elecmap::{Split, TaskId};

#[derive(Parser, Debug)]
#[command(name = "elecmap", version, about = "Map electricity access from satellite imagery")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the working directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Cap the number of tiles used by tile, train and evaluate.
    #[arg(long, global = true)]
    limit_tiles: Option<usize>,
    /// Re-run stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic region from the [synth] section.
    Synth,
    /// Cut scenes into grid tiles.
    Tile,
    /// Aggregate customer and building points into tile labels.
    Label,
    /// Assign tiles to train/val/test_in/test_out and verify the split.
    Split,
    /// Train a model for one task.
    Train {
        #[arg(value_parser = parse_task)]
        task: TaskId,
    },
    /// Evaluate a trained model on a split.
    Evaluate {
        #[arg(value_parser = parse_task)]
        task: TaskId,
        #[arg(value_parser = parse_split)]
        split: Split,
    },
    /// Compare the access model with a nighttime-lights threshold.
    Baseline,
    /// Collect evaluation outputs into report tables.
    Report,
    /// Run every stage in order, skipping those that are up to date.
    Run,
}

fn parse_task(s: &str) -> Result<TaskId, String> {
    TaskId::parse(s).ok_or_else(|| {
        let names: Vec<&str> = TaskId::ALL.iter().map(|t| t.as_str()).collect();
        format!("unknown task `{s}`; expected one of {}", names.join(", "))
    })
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Split::ALL.iter().map(|t| t.as_str()).collect();
        format!("unknown split `{s}`; expected one of {}", names.join(", "))
    })
}

fn load_config(cli: &Cli) -> elecmap::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    if cli.limit_tiles.is_some() {
        cfg.limit_tiles = cli.limit_tiles;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.cached { "up to date" } else { "done" };
    println!("{}: {state} ({})", o.stage, o.manifest.display());
    for w in &o.warnings {
        println!("  warning: {w}");
    }
}

fn run(cli: &Cli) -> elecmap::Result<()> {
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::new(cfg)?;
    pipeline.force = cli.force;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::Tile => Stage::Tile,
        Command::Label => Stage::Label,
        Command::Split => Stage::Split,
        Command::Train { task } => Stage::Train(task),
        Command::Evaluate { task, split } => Stage::Evaluate(task, split),
        Command::Baseline => Stage::Baseline,
        Command::Report => Stage::Report,
        Command::Run => {
            for o in pipeline.run_all()? {
                print_outcome(&o);
            }
            return Ok(());
        }
    };
    print_outcome(&pipeline.run(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
