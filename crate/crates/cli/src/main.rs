use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "sddg", version, about = "Single-domain dynamic generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set meta.mu=0.5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    NoMeta,
    NoIm,
    NoDynamic,
    NoPerturb,
}

#[derive(Subcommand)]
enum Command {
    /// Render every configured domain to PNG files plus index.json.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train, writing trace.jsonl, checkpoints and a final report to the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Switch components off. Repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the untrained step-0 checkpoint and stop.
        #[arg(long)]
        init_only: bool,
        /// Print a progress line every N steps (0 = never).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on the unseen domains.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to `<run_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accept a checkpoint whose architecture differs from the config.
        #[arg(long)]
        allow_mismatch: bool,
        /// Also write per-domain dynamic-weight CSVs.
        #[arg(long)]
        dump_weights: bool,
    },
    /// Train the ablation grid over several seeds, or sweep config values.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Sweep instead of the grid: `PATH=V1,V2,...`. Repeatable.
        #[arg(long, value_name = "PATH=VALUES")]
        sweep: Vec<String>,
        /// Output directory; defaults to `<run_dir>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write (source, natural, perturbed) PNG triplets.
    PerturbPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-domain dynamic-weight CSVs for a checkpoint.
    DumpWeights {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Print the resolved config as JSON.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, out, force } => commands::gen_data(&cfg, &out, force),
        Command::Train { cfg, ablate, resume, init_only, log_every } => {
            commands::train(&cfg, &ablate, resume.as_deref(), init_only, log_every)
        }
        Command::Eval { cfg, checkpoint, out, allow_mismatch, dump_weights } => {
            commands::eval(&cfg, &checkpoint, out, allow_mismatch, dump_weights)
        }
        Command::Ablate { cfg, seeds, sweep, out } => commands::ablate(&cfg, &seeds, &sweep, out),
        Command::PerturbPreview { cfg, n, out } => commands::perturb_preview(&cfg, n, &out),
        Command::DumpWeights { cfg, checkpoint, out, allow_mismatch } => {
            commands::dump_weights(&cfg, &checkpoint, &out, allow_mismatch)
        }
        Command::PrintConfig { cfg } => commands::print_config(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.chain().any(|c| c.downcast_ref::<sddg_core::Error>().is_some_and(|e| e.is_divergence()));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
