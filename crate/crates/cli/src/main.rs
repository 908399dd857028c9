//! `raise` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "raise", version, about = "Requirement-adaptive iterative refinement for text-to-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// HTTP backends from the config endpoints and RAISE_*_URL variables.
    Real,
    /// In-process simulated backends.
    Sim,
}

#[derive(Debug, Args)]
struct RunOptions {
    /// JSON config mirroring RunConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that receives one sub-directory per run.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides run_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of concurrent candidate executions.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_enum, default_value_t = Profile::Real)]
    backend_profile: Profile,
    /// Runs exactly N rounds, ignoring the adaptive stops.
    #[arg(long, value_name = "N")]
    force_rounds: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a single prompt.
    Run {
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Refine every line of a prompts file and write metrics.json.
    Batch {
        #[arg(long)]
        prompts_file: PathBuf,
        /// Number of prompts processed at once.
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Print a round-by-round account of a trace.
    Inspect { trace: PathBuf },
    /// Re-execute a sim trace and check it reproduces exactly.
    Replay {
        trace: PathBuf,
        /// Defaults to config.json next to the trace.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate efficiency metrics over run directories.
    Report {
        /// A batch output directory or individual run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Recount totals from the traces instead of trusting summaries.
        #[arg(long)]
        recount: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { prompt, opts } => commands::run(&prompt, &opts),
        Command::Batch { prompts_file, concurrency, opts } => commands::batch(&prompts_file, concurrency, &opts),
        Command::Inspect { trace } => commands::inspect(&trace),
        Command::Replay { trace, config, seed } => commands::replay(&trace, config.as_deref(), seed),
        Command::Report { dirs, recount, json } => commands::report(&dirs, recount, json),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_flags() {
        let cli = Cli::try_parse_from([
            "raise", "run", "--prompt", "a cat", "--seed", "7", "--backend-profile", "sim", "--force-rounds", "2",
        ])
        .unwrap();
        let Command::Run { prompt, opts } = cli.command else { panic!("not run") };
        assert_eq!(prompt, "a cat");
        assert_eq!(opts.seed, Some(7));
        assert_eq!(opts.backend_profile, Profile::Sim);
        assert_eq!(opts.force_rounds, Some(2));
        assert_eq!(opts.out, PathBuf::from("runs"));
    }

    #[test]
    fn report_needs_a_directory() {
        assert!(Cli::try_parse_from(["raise", "report"]).is_err());
    }

    #[test]
    fn unknown_profile_is_rejected() {
        assert!(Cli::try_parse_from(["raise", "run", "--prompt", "x", "--backend-profile", "mock"]).is_err());
    }
}
