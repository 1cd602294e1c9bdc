use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use daeobs_cli::commands::{self, SimArgs, SynthArgs, Theorem, EXIT_INPUT};
use daeobs_cli::file::ModeName;

/// Estimator design for nonlinear descriptor systems.
///
/// Exit codes: 0 pass, 1 condition failed, 2 input error, 3 solver
/// indeterminate.
#[derive(Parser)]
#[command(name = "daeobs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank of E, Wong limits, regularity and index of the pencils, and the
    /// necessary rank condition.
    Analyze {
        file: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check the file's gains and certificate against a condition set.
    Verify {
        file: PathBuf,
        /// 1: state estimator, 2: square estimator, 3: asymptotic observer.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        theorem: u8,
        /// Override the file's delta.
        #[arg(long)]
        delta: Option<f64>,
        /// Absolute margin for strict inequalities.
        #[arg(long)]
        margin: Option<f64>,
        /// Write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Search for gains and a certificate; the result is verified before it
    /// is written.
    Synthesize {
        file: PathBuf,
        /// Number of innovation channels.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Outer gain-iteration rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Strictness margin imposed by the solver.
        #[arg(long)]
        eps: Option<f64>,
        /// Parallel starts with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output system file with gains and certificate filled in.
        #[arg(long)]
        out: PathBuf,
        /// Residual trace written when the solver is indeterminate.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run plant and estimator together and summarise the error.
    Simulate {
        file: PathBuf,
        /// Start and end time, `a,b`.
        #[arg(long)]
        t_span: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        dt: Option<f64>,
        /// Plant initial state, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        /// Estimator initial state, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        z0: Option<String>,
        /// CSV trace output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    Thm1,
    Thm2,
}

fn numbers(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("{what}: cannot parse {s:?} as a number"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Analyze { file, json } => commands::cmd_analyze(&file, json.as_deref()),
        Command::Verify { file, theorem, delta, margin, report } => {
            commands::cmd_verify(&file, Theorem::from_number(theorem)?, delta, margin, report.as_deref())
        }
        Command::Synthesize { file, k, mode, seed, max_iters, rounds, eps, jobs, out, trace, report } => {
            let args = SynthArgs {
                k,
                mode: mode.map(|m| match m {
                    CliMode::Thm1 => ModeName::Thm1,
                    CliMode::Thm2 => ModeName::Thm2,
                }),
                seed,
                max_iters,
                rounds,
                eps,
                jobs,
                out,
                trace,
                report,
            };
            commands::cmd_synthesize(&file, &args)
        }
        Command::Simulate { file, t_span, dt, x0, z0, out } => {
            let t_span = match t_span {
                Some(s) => match numbers(&s, "--t-span")?[..] {
                    [a, b] => Some((a, b)),
                    _ => return Err(anyhow!("--t-span takes two numbers, a,b")),
                },
                None => None,
            };
            let args = SimArgs {
                t_span,
                dt,
                x0: x0.map(|s| numbers(&s, "--x0")).transpose()?,
                z0: z0.map(|s| numbers(&s, "--z0")).transpose()?,
                out,
            };
            commands::cmd_simulate(&file, &args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
