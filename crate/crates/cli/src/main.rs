use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use texmotion_core::pipeline::{artifacts, evaluate, run_stages, PipelineConfig, PipelineError, Stage, MANIFEST_FILE};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Transfers the motion of a source texture video onto a target structure
/// mask. Every stage reads and writes files in the run directory, so stages
/// can be run one at a time or together.
#[derive(Debug, Parser)]
#[command(name = "texmotion", version)]
struct Cli {
    /// TOML run configuration; relative paths inside it are resolved against
    /// its directory. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed added to every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the bit-reproducible reference mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory (overrides `paths.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pad both masks to the patch grid and write their distance maps.
    DistanceMap,
    /// Match target guidance to source guidance and synthesize frame 0.
    TransferInitial,
    /// Train the patch VQ-VAE on every source frame.
    TrainVqvae,
    /// Encode source patches into token grids.
    Encode,
    /// Train the token forecaster on the encoded source.
    TrainForecaster,
    /// Encode the target's frame 0 and forecast every later frame.
    Predict,
    /// Decode predicted tokens and merge patches into output frames.
    Merge,
    /// Run every stage, or the tail starting at `--from`.
    Run {
        #[arg(long, value_parser = parse_stage)]
        from: Option<Stage>,
    },
    /// Report accuracy, reconstruction, matching and smoothness figures for a
    /// finished run directory.
    Eval {
        /// Run directory; defaults to `--out` or the configured output.
        dir: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(out) = &cli.out {
        config.paths.output = out.clone();
    }
    Ok(config)
}

fn stages(command: &Command) -> Vec<Stage> {
    match command {
        Command::DistanceMap => vec![Stage::DistanceMap],
        Command::TransferInitial => vec![Stage::TransferInitial],
        Command::TrainVqvae => vec![Stage::TrainVqvae],
        Command::Encode => vec![Stage::Encode],
        Command::TrainForecaster => vec![Stage::TrainForecaster],
        Command::Predict => vec![Stage::Predict],
        Command::Merge => vec![Stage::Merge],
        Command::Run { from } => from.unwrap_or(Stage::DistanceMap).onward(),
        Command::Eval { .. } => Vec::new(),
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    if let Command::Eval { dir } = &cli.command {
        let dir: &Path = dir.as_deref().unwrap_or(&config.paths.output);
        println!("{}", evaluate(dir)?);
        return Ok(());
    }
    let outcome = run_stages(&config, &stages(&cli.command), &mut |line| eprintln!("{line}"))?;
    if let Some(frames) = &outcome.frames {
        println!("wrote {} frames to {}", frames.frame_count(), outcome.dir.join(artifacts::FRAMES).display());
    }
    println!("manifest: {}", outcome.dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
