use clap::{Args, Parser, Subcommand};
use intraloss_cli::{commands, CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "intraloss", version, about = "Margin softmax losses with an intra-class gradient-enhancing term")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as CSV.
    GenData(Common),
    /// Train one configuration and write trace, model, report and sphere dumps.
    Train(Common),
    /// Compare analytic and finite-difference gradients for every scheme.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Train each `[[runs]]` entry and tabulate the results.
    Compare(Common),
}

fn run(cli: Cli) -> Result<String, CliError> {
    let common = match &cli.command {
        Command::GenData(c) | Command::Train(c) | Command::Compare(c) => c,
        Command::Gradcheck { common, .. } => common,
    };
    let cfg = RunConfig::load(&common.config)?.with_seed(common.seed);
    cfg.validate()?;
    match &cli.command {
        Command::GenData(c) => commands::gen_data(&cfg, &c.out),
        Command::Train(c) => commands::train(&cfg, &c.out),
        Command::Gradcheck { common, corrupt_gradient } => commands::gradcheck(&cfg, &common.out, *corrupt_gradient),
        Command::Compare(c) => commands::compare(&cfg, &c.out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
