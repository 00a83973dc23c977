mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use insertion_core::decoding::DecodeMode;

/// Train, decode and evaluate insertion transformers.
#[derive(Parser, Debug)]
#[command(name = "insertion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set loss.temperature=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and metrics into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode inputs with a trained checkpoint, one output line per input.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// File with one whitespace-tokenized input per line (text after a tab is ignored).
        #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
        input: Option<PathBuf>,
        /// A single whitespace-tokenized input.
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long)]
        mode: Option<DecodeMode>,
        /// EOS penalty β.
        #[arg(long)]
        beta: Option<f64>,
        /// Write the iteration-level trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus file or the configured task's dev split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated corpus; defaults to the dev split of the configured task.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long, conflicts_with = "sweep_beta")]
        beta: Option<f64>,
        /// Sweep β over `start:end:step`, e.g. `0:7:0.5`.
        #[arg(long, value_name = "START:END:STEP")]
        sweep_beta: Option<String>,
        /// Report directory; defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a trace file as a per-iteration insertion diagram.
    TraceRender {
        trace: PathBuf,
    },
}

/// Marks errors caused by bad invocations or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<insertion_core::Error>() {
            return match e {
                insertion_core::Error::Config(_) | insertion_core::Error::Parse { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            run_dir,
            resume,
        } => commands::train(&config, &run_dir, resume.as_deref()),
        Command::Decode {
            config,
            checkpoint,
            input,
            tokens,
            mode,
            beta,
            trace,
        } => commands::decode(&commands::DecodeArgs {
            config,
            checkpoint,
            input,
            tokens,
            mode,
            beta,
            trace,
        }),
        Command::Eval {
            config,
            checkpoint,
            data,
            mode,
            beta,
            sweep_beta,
            out_dir,
        } => commands::eval(&commands::EvalArgs {
            config,
            checkpoint,
            data,
            mode,
            beta,
            sweep_beta,
            out_dir,
        }),
        Command::TraceRender { trace } => commands::trace_render(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
