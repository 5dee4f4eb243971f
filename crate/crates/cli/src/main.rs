//! `wlqmc`: bounds, exact diagonalization, sampling and verification for
//! transverse-field spin models described by a JSON config.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "wlqmc", version, about = "Worldline Monte Carlo for transverse-field spin models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Gap, decay and finite-speed constants (and decay bounds for observable pairs).
    Bounds(BoundsArgs),
    /// Exact thermal means and truncated correlations by diagonalization.
    Exact(ExactArgs),
    /// Estimate quantum means with the worldline chain.
    Sample(SampleArgs),
    /// Estimate truncated correlations of all observable pairs.
    Correlate(SampleArgs),
    /// Randomized checks of the pointwise identities of the dynamics.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Observable files (JSON); defaults to the spin at the first site.
    #[arg(long, num_args = 1..)]
    pub observables: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct ExactArgs {
    #[command(flatten)]
    pub common: Common,
    /// Largest number of sites to diagonalize.
    #[arg(long, default_value_t = wlqmc::oracle::DEFAULT_CAP)]
    pub cap: usize,
    /// Write the Hamiltonian as a binary matrix dump.
    #[arg(long)]
    pub dump_matrix: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Measurement window in process time, per chain.
    #[arg(long, default_value_t = 10_000.0)]
    pub run_length: f64,
    #[arg(long, default_value_t = 100.0)]
    pub burn_in: f64,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Observe on a grid of this spacing instead of time-weighting.
    #[arg(long)]
    pub grid: Option<f64>,
    /// Average observables over the circle instead of reading them at time 0.
    #[arg(long)]
    pub rotation_average: bool,
    /// Also estimate by importance sampling with this many draws.
    #[arg(long)]
    pub importance: Option<usize>,
    /// Include exact oracle values when the model is small enough.
    #[arg(long)]
    pub exact: bool,
    /// Identity checks to run before sampling; failure exits with 3.
    #[arg(long, value_delimiter = ',')]
    pub checks: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Event trace of chain 0 (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Time-weighted series of the first observable in chain 0 (CSV).
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Coloring of the final configuration of chain 0 (CSV).
    #[arg(long)]
    pub final_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "rn,commute,balance,poisson,locality")]
    pub checks: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Scale the addition rate density seen by the checks (negative control).
    #[arg(long, hide = true)]
    pub corrupt_rate: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Bounds(a) => commands::bounds(a),
        Command::Exact(a) => commands::exact(a),
        Command::Sample(a) => commands::sample(a, false),
        Command::Correlate(a) => commands::sample(a, true),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wlqmc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
