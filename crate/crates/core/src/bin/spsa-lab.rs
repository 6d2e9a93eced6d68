use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spsa_lab::config::ExperimentConfig;
use spsa_lab::harness::{self, exit_code, Overrides};

#[derive(Parser)]
#[command(
    name = "spsa-lab",
    version,
    about = "SPSA with active and zig-zag exploration: runs, ensembles and mean-flow analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed.master`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensembles.
    #[arg(long, env = "SPSA_LAB_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single trajectory.
    Run(Common),
    /// Run the eps_bullet x {iid, zigzag} ensemble matrix and fit scaling laws.
    Experiment(Common),
    /// Mean-field grid, flows and equilibrium report.
    Meanflow(Common),
    /// Equilibrium of the mean field and its linearization.
    Equilibrium(Common),
    /// Moment and regeneration diagnostics for the probe law.
    ProbeCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

fn load(common: &Common) -> spsa_lab::Result<ExperimentConfig> {
    let overrides = Overrides { out: common.out.clone(), seed: common.seed, workers: common.workers };
    harness::load_config(&common.config, &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => load(c).and_then(|cfg| harness::cmd_run(&cfg)),
        Command::Experiment(c) => load(c).and_then(|cfg| harness::cmd_experiment(&cfg)),
        Command::Meanflow(c) => load(c).and_then(|cfg| harness::cmd_meanflow(&cfg)),
        Command::Equilibrium(c) => load(c).and_then(|cfg| harness::cmd_equilibrium(&cfg)),
        Command::ProbeCheck { common, samples } => {
            load(common).and_then(|cfg| harness::cmd_probe_check(&cfg, *samples))
        }
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("wrote {} files to {}", outcome.files.len(), outcome.out_dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
