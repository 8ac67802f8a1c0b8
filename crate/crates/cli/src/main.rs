//! Experiment harness: train, evaluate, diagnose, loop at inference,
//! fine-tune, generate tasks, and compare runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use looplab_core::Error;

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "LOOPLAB_OUT";

#[derive(Parser)]
#[command(name = "looplab", version, about = "Train, grow, loop and diagnose small decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config (optionally growing and cooling down).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults under $LOOPLAB_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validate the config and print the plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate reasoning primitives from a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Task kinds (default: all five primitives).
        #[arg(long)]
        kind: Vec<String>,
        /// Restrict variable-assignment depths (default 0,1,2).
        #[arg(long)]
        depth: Vec<u8>,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Evaluate under a different schedule descriptor (same physical
        /// layer count).
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Mechanistic diagnostics over a checkpoint.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        /// depth|lens|norms|effects|swap|repeat|all
        #[arg(long)]
        which: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        schedule: Option<String>,
        /// Documents in the diagnostic batch.
        #[arg(long, default_value_t = 8)]
        docs: usize,
        /// Episodes per task for swap/repeat evaluations.
        #[arg(long, default_value_t = 64)]
        episodes: usize,
        /// Swap block length (1 or 2).
        #[arg(long, default_value_t = 1)]
        swap_len: usize,
        /// Repeat-block start (default: layer-wise middle).
        #[arg(long)]
        start: Option<usize>,
        /// Repeat-block length (default: growth block size, else 2).
        #[arg(long)]
        len: Option<usize>,
        /// Max extra repetitions swept.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Evaluate with a block repeated extra times at inference.
    LoopEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        start: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
    },
    /// Supervised fine-tuning sweep over dataset sizes and seeds.
    Sft {
        #[arg(long)]
        ckpt: PathBuf,
        /// SFT config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a task dataset file.
    GenTasks {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        depth: u8,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trade-off table across finished run directories.
    Compare {
        /// Run directories (at least two).
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::Io(_)) | Some(Error::Json(_)) | Some(Error::Checkpoint(_)) => 4,
        Some(_) => 2,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                4
            } else {
                2
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            dry_run,
        } => commands::train::run(&config, out, seed, resume, dry_run),
        Command::Eval {
            ckpt,
            out,
            seed,
            kind,
            depth,
            shots,
            episodes,
            schedule,
        } => commands::eval::run(&ckpt, out, seed, &kind, &depth, shots, episodes, schedule.as_deref()),
        Command::Diag {
            ckpt,
            which,
            out,
            seed,
            schedule,
            docs,
            episodes,
            swap_len,
            start,
            len,
            reps,
        } => commands::diag::run(commands::diag::DiagArgs {
            ckpt,
            which,
            out,
            seed,
            schedule,
            docs,
            episodes,
            swap_len,
            start,
            len,
            reps,
        }),
        Command::LoopEval {
            ckpt,
            out,
            seed,
            start,
            len,
            reps,
            episodes,
        } => commands::loop_eval::run(&ckpt, out, seed, start, len, reps, episodes),
        Command::Sft {
            ckpt,
            config,
            out,
            seed,
        } => commands::sft::run(&ckpt, &config, out, seed),
        Command::GenTasks {
            kind,
            depth,
            n,
            seed,
            out,
        } => commands::gen_tasks::run(&kind, depth, n, seed, &out),
        Command::Compare { run_dirs, out } => commands::compare::run(&run_dirs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
