use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use odtq_core::pipeline::{with_threads, Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "odtq", version, about = "Travel-time estimation with calibrated intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic network, trips and splits.
    Generate(Common),
    /// Train the path policy.
    TrainPath(Common),
    /// Decode paths and train the interval model.
    TrainUq(Common),
    /// Fit the interval scaling on the calibration split.
    Calibrate(Common),
    /// Score the test split and write report.json.
    Evaluate(Common),
    /// Calibrated intervals for a queries file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Queries file; defaults to the generated dataset's queries.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Run stages in order, from generate through evaluate by default.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run only this stage.
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(Pipeline::new(cfg, &c.out))
}

fn run(c: &Common, stages: &[Stage], queries: Option<&PathBuf>) -> Result<()> {
    let p = pipeline(c)?;
    with_threads(c.threads, || -> Result<()> {
        for &s in stages {
            eprintln!("odtq: {s}");
            p.run_stage(s, queries.map(PathBuf::as_path))
                .with_context(|| format!("stage {s} failed"))?;
        }
        Ok(())
    })??;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(c) => run(c, &[Stage::Generate], None),
        Command::TrainPath(c) => run(c, &[Stage::TrainPath], None),
        Command::TrainUq(c) => run(c, &[Stage::TrainUq], None),
        Command::Calibrate(c) => run(c, &[Stage::Calibrate], None),
        Command::Evaluate(c) => run(c, &[Stage::Evaluate], None),
        Command::Predict { common, queries } => run(common, &[Stage::Predict], queries.as_ref()),
        Command::Run { common, stage, queries } => match stage {
            Some(s) => run(common, &[*s], queries.as_ref()),
            None => run(
                common,
                &[Stage::Generate, Stage::TrainPath, Stage::TrainUq, Stage::Calibrate, Stage::Evaluate],
                queries.as_ref(),
            ),
        },
    }
}
