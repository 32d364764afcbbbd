use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pointseg_cli::{cmd_eval, cmd_infer, cmd_synth, cmd_train, Overrides, RunConfig};
use pointseg_core::Ablation;

/// Joint semantic and instance segmentation of point clouds.
#[derive(Parser, Debug)]
#[command(name = "pointseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenes processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// CRF terms used during refinement: none, unary, pairwise or full.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Mean-shift bandwidth in embedding space.
    #[arg(long, global = true)]
    bandwidth: Option<f64>,
    /// Write per-stage artifacts under `<output>/intermediate/`.
    #[arg(long, global = true)]
    dump_intermediate: bool,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate synthetic train and test scenes.
    Synth,
    /// Train the network on the train split.
    Train,
    /// Segment every test scene.
    Infer,
    /// Score predictions against the test ground truth.
    Eval,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let over = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        ablation: cli.ablation,
        bandwidth: cli.bandwidth,
        dump_intermediate: cli.dump_intermediate,
        data_dir: cli.data_dir.clone(),
        model: cli.model.clone(),
        output_dir: cli.output_dir.clone(),
        epochs: cli.epochs,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &over)?;
    match cli.command {
        Command::Synth => {
            cmd_synth(&cfg)?;
        }
        Command::Train => cmd_train(&cfg)?,
        Command::Infer => cmd_infer(&cfg)?,
        Command::Eval => print!("{}", cmd_eval(&cfg)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
