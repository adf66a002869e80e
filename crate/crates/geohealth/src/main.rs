use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geohealth::config::PipelineConfig;
use geohealth::pipeline::{run_synth, Pipeline};
use geohealth::Result;

/// County health statistics from geo-referenced image tags.
#[derive(Parser)]
#[command(name = "geohealth", version, about)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize the raw image, health and demographics inputs.
    Ingest,
    /// Resolve each image's coordinates to a county FIPS code.
    Geotag,
    /// Fetch machine tags for every geotagged image.
    Tag,
    /// Build the per-county feature matrices.
    Featurize,
    /// Cross-validated ridge regression over every statistic and feature set.
    Evaluate,
    /// Scan the tag confidence threshold and report the best value.
    Sweep,
    /// Render grids, scatter plots and feature charts from evaluation output.
    Report,
    /// Generate a synthetic corpus with a planted signal.
    Synth,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth = cli.command {
        let dir = cli.output.unwrap_or_else(|| PathBuf::from("synth_corpus"));
        return run_synth(&dir, cli.seed.unwrap_or(42));
    }

    let config_path = cli.config.ok_or_else(|| {
        geohealth::Error::Config("no configuration file given; pass --config <path>".into())
    })?;
    let (config, sha) = PipelineConfig::load(&config_path)?;
    config.validate()?;
    let pipeline = Pipeline::new(config, sha, cli.seed, cli.output)?;
    match cli.command {
        Command::Ingest => pipeline.run_ingest(),
        Command::Geotag => pipeline.run_geotag(),
        Command::Tag => pipeline.run_tag(),
        Command::Featurize => pipeline.run_featurize(),
        Command::Evaluate => pipeline.run_evaluate(),
        Command::Sweep => pipeline.run_sweep(),
        Command::Report => pipeline.run_report(),
        Command::Synth => unreachable!(),
    }
}
