use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pertloss::cli::{run, Overrides};

#[derive(Parser)]
#[command(
    name = "pertloss",
    version,
    about = "Perturbed loss-consistency and irrecoverability experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (default: config `output_dir`, then $PERTLOSS_OUTPUT_DIR).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads for trial-level parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            output_dir,
            seed,
            trials,
            jobs,
        } => {
            let outcome = run(
                &config,
                &Overrides {
                    output_dir,
                    seed,
                    trials,
                    jobs,
                },
            );
            if let Some(dir) = &outcome.output_dir {
                eprintln!("output: {}", dir.display());
            }
            eprintln!("{}", outcome.message);
            ExitCode::from(outcome.status.code() as u8)
        }
    }
}
