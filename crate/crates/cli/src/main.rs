mod case;
mod report;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voltguard::controller::{Dynamics, PriorMode};
use voltguard::oracle::SlackPolicy;

pub const EXIT_SOLVER: u8 = 2;
pub const EXIT_INPUT: u8 = 3;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_INPUT, error: error.into() }
    }

    pub fn solver(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_SOLVER, error: error.into() }
    }
}

#[derive(Parser)]
#[command(name = "voltguard", version, about = "Online robust voltage control on feeders with unknown topology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write trace.csv, summary.json and manifest.json.
    Run(RunArgs),
    /// Run a grid of deltas, priors and seeds and aggregate over seeds.
    Sweep(SweepArgs),
    /// Turn trace files into long-format CSV for plotting.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Slack {
    Single,
    TwoStage,
    Pinned,
}

impl From<Slack> for SlackPolicy {
    fn from(s: Slack) -> Self {
        match s {
            Slack::Single => SlackPolicy::Single,
            Slack::TwoStage => SlackPolicy::TwoStage,
            Slack::Pinned => SlackPolicy::Pinned,
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct CaseArgs {
    /// Case directory (edges.csv, series.csv, optional case.conf) or `synth:n=8,seed=1[,noise=0.5,len=2001]`.
    #[arg(long, default_value = "synth:n=8,seed=1")]
    pub case: String,
    /// Config file whose keys override the case settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    pub dynamics: Dynamics,
    /// Episode length; defaults to the series length minus one.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Line swaps, e.g. "1000: -33>40,-46>48,+1>40,+10>48".
    #[arg(long = "topology-change")]
    pub topology_change: Option<String>,
    /// Buses withheld from control and observation, e.g. "8,18,21".
    #[arg(long = "partial-control")]
    pub partial_control: Option<String>,
    /// Give the controller the true noise bound.
    #[arg(long)]
    pub known_eta: bool,
    #[arg(long, value_enum, default_value = "single")]
    pub slack: Slack,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    #[arg(long)]
    pub prior: Option<PriorMode>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Seed of the random initial estimate; defaults to the case seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check the estimate and the true model against the full-trajectory set each step.
    #[arg(long)]
    pub audit: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Comma-separated deltas; defaults to the case delta.
    #[arg(long)]
    pub deltas: Option<String>,
    /// Comma-separated prior modes; defaults to the case prior.
    #[arg(long)]
    pub priors: Option<String>,
    /// Comma-separated initialization seeds.
    #[arg(long, default_value = "1,2,3,4")]
    pub seeds: String,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Trace files written by `run`.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run::cmd_run(&a),
        Command::Sweep(a) => sweep::cmd_sweep(&a),
        Command::Report(a) => report::cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
