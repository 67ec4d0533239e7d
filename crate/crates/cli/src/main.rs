use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vind_cli::{cmd_demo_intractability, cmd_eval, cmd_fit, cmd_generate, cmd_sweep, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "vind", version, about = "Latent dynamics inference on sequential data")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the Lorenz data set and split it.
    Generate,
    /// Train on the training partition.
    Fit {
        /// Continue from the last checkpoint in the fit directory.
        #[arg(long)]
        resume: bool,
    },
    /// Forward-interpolation R²_k for each partition.
    Eval,
    /// Fit and evaluate over a grid of latent dimensions and seeds.
    Sweep,
    /// Normalizer of the two-step toy model by quadrature.
    DemoIntractability,
    /// Print the full default configuration.
    PrintDefaults,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = || RunConfig::load(cli.config.as_deref(), cli.seed);
    match cli.command {
        Command::PrintDefaults => print!("{}", RunConfig::default().to_toml()?),
        Command::Generate => {
            let dir = cmd_generate(&load()?, &cli.out)?;
            println!("data written to {}", dir.display());
        }
        Command::Fit { resume } => {
            let out = cmd_fit(&load()?, &cli.out, resume)?;
            let h = out.history();
            println!("{} fit: {} epochs, final ELBO {:?}", h.label, out.state.epoch, h.records.last().and_then(|r| r.elbo));
        }
        Command::Eval => {
            for r in cmd_eval(&load()?, &cli.out)? {
                println!("{}: R2_0 = {}", r.label, r.rows[0].r2);
            }
        }
        Command::Sweep => {
            let rows = cmd_sweep(&load()?, &cli.out)?;
            println!("{} sweep runs written", rows.len());
        }
        Command::DemoIntractability => {
            let r = cmd_demo_intractability(&load()?, &cli.out)?;
            println!(
                "quadrature {} vs Gaussian {}: relative deviation {}",
                r.kappa_inv_quadrature, r.kappa_inv_gaussian, r.relative_deviation
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
