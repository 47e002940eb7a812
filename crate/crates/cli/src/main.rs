use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rhm_core::parallel::{set_worker_threads, Parallelism};
use rhm_core::runner::{generate, run_experiment, write_outputs, ExperimentConfig, ExperimentKind};
use rhm_core::Error;

#[derive(Parser)]
#[command(name = "rhm", version, about = "Forward-backward diffusion experiments on hierarchical data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a grammar and starting data.
    Generate(Common),
    /// Forward-backward ensembles and their correlations (rhm_epsilon, rhm_masking).
    Diffuse(Common),
    /// Mean-field phase diagnosis and theory curves.
    Meanfield(Common),
    /// Gaussian random field baseline.
    Grf(Common),
    /// Correlations of external forward-backward transcripts.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Run every job on the calling thread.
    #[arg(long)]
    sequential: bool,
}

fn expected_kinds(cmd: &Command) -> &'static [ExperimentKind] {
    use ExperimentKind::*;
    match cmd {
        Command::Generate(_) => &[RhmEpsilon, RhmMasking, Meanfield],
        Command::Diffuse(_) => &[RhmEpsilon, RhmMasking],
        Command::Meanfield(_) => &[Meanfield],
        Command::Grf(_) => &[Grf],
        Command::Analyze(_) => &[Transcripts],
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let (Command::Generate(common)
    | Command::Diffuse(common)
    | Command::Meanfield(common)
    | Command::Grf(common)
    | Command::Analyze(common)) = &cli.command;
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    let allowed = expected_kinds(&cli.command);
    if !allowed.contains(&config.kind) {
        let names: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
        return Err(Error::Config(format!(
            "config kind `{}` does not fit this subcommand (expected {})",
            config.kind.name(),
            names.join(" or ")
        )));
    }
    if let Some(n) = common.threads {
        set_worker_threads(n).map_err(Error::Config)?;
    }
    let par = if common.sequential { Parallelism::Sequential } else { Parallelism::Rayon };
    if let Command::Generate(_) = cli.command {
        return generate(&config, &config.output_dir);
    }
    let bundle = run_experiment(&config, par)?;
    write_outputs(&bundle, &config.output_dir)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
