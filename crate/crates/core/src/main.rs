use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pbm_vfl::cli::{cmd_account, cmd_gen, cmd_run, render_account, AccountParams};

#[derive(Parser)]
#[command(
    name = "pbm-vfl",
    version,
    about = "Vertical federated learning with the Poisson binomial mechanism"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every repeat of an experiment spec; writes trace and summary CSVs.
    Run { spec: PathBuf },
    /// Print feature and sample Rényi-DP budgets, in units of C0.
    Account {
        /// Iterations.
        #[arg(long = "T")]
        t: usize,
        /// Minibatch size.
        #[arg(long = "B")]
        batch: usize,
        /// Embedding dimension.
        #[arg(long = "P")]
        p_dim: usize,
        /// Binomial trials per coordinate.
        #[arg(long = "b")]
        b: u32,
        #[arg(long)]
        beta: f64,
        /// Parties.
        #[arg(long = "M")]
        m: usize,
        /// Training samples.
        #[arg(long = "N")]
        n: usize,
        /// Rényi orders; repeat the flag or separate with commas.
        #[arg(long = "alpha", value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
    /// Write a synthetic dataset CSV and its party sidecar.
    Gen { spec: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { spec } => cmd_run(&spec).map(|out| {
            for t in &out.traces {
                eprintln!("wrote {}", t.display());
            }
            eprintln!("wrote {}", out.summary.display());
        }),
        Command::Account {
            t,
            batch,
            p_dim,
            b,
            beta,
            m,
            n,
            alphas,
        } => cmd_account(&AccountParams {
            t,
            batch,
            p_dim,
            b,
            beta,
            m,
            n,
            alphas,
        })
        .map(|rows| print!("{}", render_account(&rows))),
        Command::Gen { spec } => cmd_gen(&spec).map(|(features, parties)| {
            eprintln!("wrote {}", features.display());
            eprintln!("wrote {}", parties.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
