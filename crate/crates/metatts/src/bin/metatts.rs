//! Command-line front end: one subcommand per pipeline phase. Every command
//! reads a TOML run config (overridable via `METATTS_*` environment
//! variables and the global flags), writes its artifacts into the run
//! directory, and exits nonzero if anything failed to write or validate.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metatts::cli::{
    cmd_adapt, cmd_eval, cmd_gen_data, cmd_meta, cmd_plot, cmd_pretrain, load_run_config,
};

#[derive(Parser)]
#[command(
    name = "metatts",
    version,
    about = "Few-shot voice-cloning experiments on synthetic spectrograms: \
             pre-train, meta-learn, adapt, evaluate, plot."
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override both the corpus and training root seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing artifacts of the invoked phase.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the four synthetic corpus splits.
    GenData,
    /// Multi-speaker pre-training to the θ_T checkpoint.
    Pretrain {
        /// Corpus directory (default: <run>/corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Speaker-LUT reset plus meta-learning to the θ_M checkpoint.
    Meta {
        /// Input θ_T checkpoint (default: <run>/pretrain/theta_t.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Few-shot adaptation to every held-out speaker.
    Adapt {
        /// Input checkpoint (default: θ_M, or θ_T with --baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Start from θ_T with a freshly randomized speaker row instead of θ_M.
        #[arg(long)]
        baseline: bool,
        /// Adaptation step budget (default: config adapt_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Snapshot step marks, comma-separated (default: config snapshots).
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<usize>>,
    },
    /// Meta-vs-baseline adaptation experiment: curves and summary.
    Eval {
        /// θ_M checkpoint (default: <run>/meta/theta_m.ckpt).
        #[arg(long)]
        theta_m: Option<PathBuf>,
        /// θ_T checkpoint (default: <run>/pretrain/theta_t.ckpt).
        #[arg(long)]
        theta_t: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render similarity and MCD curve images from a curves file.
    Plot {
        /// Curves JSON (default: <run>/eval/curves.json).
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> metatts::error::Result<Vec<PathBuf>> {
    let mut cfg = load_run_config(cli.config.as_deref())?;
    cfg.apply_overrides(cli.seed, cli.out);
    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, cli.force),
        Cmd::Pretrain { corpus } => cmd_pretrain(&cfg, corpus.as_deref(), cli.force),
        Cmd::Meta { checkpoint, corpus } => {
            cmd_meta(&cfg, checkpoint.as_deref(), corpus.as_deref(), cli.force)
        }
        Cmd::Adapt {
            checkpoint,
            corpus,
            baseline,
            steps,
            snapshots,
        } => cmd_adapt(
            &cfg,
            checkpoint.as_deref(),
            corpus.as_deref(),
            baseline,
            steps,
            snapshots.as_deref(),
            cli.force,
        ),
        Cmd::Eval {
            theta_m,
            theta_t,
            corpus,
            steps,
        } => cmd_eval(
            &cfg,
            theta_m.as_deref(),
            theta_t.as_deref(),
            corpus.as_deref(),
            steps,
            cli.force,
        ),
        Cmd::Plot { curves } => cmd_plot(&cfg, curves.as_deref(), cli.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli) {
        Ok(artifacts) => {
            for p in &artifacts {
                println!("wrote {}", p.display());
            }
            println!("done in {:.1}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
