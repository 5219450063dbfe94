use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use comate_cli::{
    cmd_ablate, cmd_eval, cmd_export_attention, cmd_generate, cmd_gradcheck, cmd_train, CliResult,
};

/// Combined affinity/difference attention for sentence-pair matching.
///
/// Log verbosity is read from COMATE_LOG (e.g. COMATE_LOG=info).
#[derive(Parser)]
#[command(name = "comate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic perturbation dataset as JSONL.
    Generate {
        /// Synthetic spec JSON (defaults when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json and report.json into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint, optionally against a baseline checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suite; exits 3 on failure.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every composition variant plus the softmax baseline.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export E, normalised N and M of one combined head as JSON.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated tokens, "q tokens|p tokens".
        #[arg(long)]
        pair: String,
        /// 0-based layer (siamese: the interaction layer, num_layers).
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Generate { spec, out: path } => {
            cmd_generate(spec.as_deref(), &path, out)?;
        }
        Command::Train {
            config,
            data,
            out: dir,
            seed,
        } => {
            cmd_train(config.as_deref(), data.as_deref(), &dir, seed, out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            baseline,
            out: path,
        } => {
            let report = cmd_eval(&checkpoint, &data, baseline.as_deref(), out)?;
            if let Some(path) = path {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Gradcheck { config, seed } => {
            cmd_gradcheck(config.as_deref(), seed, out)?;
        }
        Command::Ablate {
            config,
            data,
            out: dir,
        } => {
            cmd_ablate(config.as_deref(), data.as_deref(), &dir, out)?;
        }
        Command::ExportAttention {
            checkpoint,
            pair,
            layer,
            head,
            out: path,
        } => {
            cmd_export_attention(&checkpoint, &pair, layer, head, &path, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COMATE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
