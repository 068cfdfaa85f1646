use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use audit_cli::{
    cmd_analyze, cmd_run, cmd_validate, AnalyzeArgs, CliResult, EmbedderChoice, RunArgs, ValidateArgs, EXIT_OK,
    EXIT_USER,
};
use audit_core::Aggregate;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "audit",
    version,
    about = "Sock-puppet audit of tracking-driven recommendations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and check the three corpus files
    Validate {
        #[arg(long)]
        outlets: PathBuf,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        claims: PathBuf,
    },
    /// Execute or resume an experiment
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after this day index; continue later with --resume
        #[arg(long)]
        halt_after_day: Option<u32>,
        /// Flush instead of fsync after each record
        #[arg(long)]
        no_sync: bool,
    },
    /// Score an archive against claims and write the report
    Analyze {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        claims: PathBuf,
        #[arg(long, default_value = "max")]
        aggregate: Aggregate,
        #[arg(long, default_value = "hash")]
        embedder: EmbedderChoice,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        /// Bootstrap resamples for delta intervals, 0 to skip
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
    },
}

fn dispatch(command: Command) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match command {
        Command::Validate {
            outlets,
            articles,
            claims,
        } => cmd_validate(
            &ValidateArgs {
                outlets,
                articles,
                claims,
            },
            &mut out,
        )
        .map(drop),
        Command::Run {
            config,
            resume,
            workers,
            halt_after_day,
            no_sync,
        } => {
            let args = RunArgs {
                config,
                resume,
                workers,
                halt_after_day,
                no_sync,
            };
            cmd_run(&args, &mut out).map(drop)
        }
        Command::Analyze {
            archive,
            claims,
            aggregate,
            embedder,
            out: dir,
            bootstrap,
        } => {
            let args = AnalyzeArgs {
                archive,
                claims,
                aggregate,
                embedder,
                out: dir,
                bootstrap,
            };
            cmd_analyze(&args, &mut out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USER } else { EXIT_OK });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
