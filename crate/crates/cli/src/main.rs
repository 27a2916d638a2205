mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Synthetic-scale pipeline for the multi-model slide encoder.
#[derive(Parser)]
#[command(name = "elf", version)]
struct Cli {
    /// Overrides the config seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its label manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretrain the encoder; writes final and best checkpoints plus a metrics log.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode every slide of a corpus into fused representations.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe on slide embeddings.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Score an external embedding set with the trained probe(s).
        #[arg(long)]
        external_embeddings: Option<PathBuf>,
        /// Labels for the external set; defaults to --labels.
        #[arg(long, requires = "external_embeddings")]
        external_labels: Option<PathBuf>,
    },
    /// Export an attention heatmap grid for one slide.
    Attnmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only this model (default: every model).
        #[arg(long)]
        model: Option<usize>,
    },
    /// Median-split survival analysis: KM tables and a log-rank test.
    EvalSurvival {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV with the id column and `score`.
        #[arg(long)]
        scores: PathBuf,
        /// CSV with the id column, `time` and `event` (1 = event, 0 = censored).
        #[arg(long)]
        survival: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suite.
    Verify {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true, env = "ELF_CORRUPT_GRADIENT", value_parser = clap::builder::BoolishValueParser::new())]
        corrupt_gradient: bool,
    },
}

/// Stable exit statuses for scripts and test harnesses.
pub enum Failure {
    Core(elf_core::Error),
    Verification(Vec<String>),
}

impl From<elf_core::Error> for Failure {
    fn from(e: elf_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use elf_core::Error as E;
        match self {
            Failure::Core(E::Config(_)) => 2,
            Failure::Core(E::NonFinite { .. } | E::Numerical(_)) => 4,
            Failure::Core(_) => 3,
            Failure::Verification(_) => 5,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| elf_core::Error::Config(format!("--threads: {e}")))?;
    }
    let seed = cli.seed;
    let load = |p: &PathBuf| config::RunConfig::load(p, seed);
    match cli.command {
        Command::Generate { config } => commands::generate(&load(&config)?)?,
        Command::Pretrain { config, corpus, resume } => commands::pretrain(&load(&config)?, corpus, resume)?,
        Command::Embed { config, corpus, checkpoint, out } => commands::embed(&load(&config)?, corpus, checkpoint, out)?,
        Command::Probe { config, embeddings, labels, external_embeddings, external_labels } => commands::probe(
            &load(&config)?,
            embeddings,
            labels,
            external_embeddings.map(|e| (e, external_labels)),
        )?,
        Command::Attnmap { config, slide, corpus, checkpoint, model } => {
            commands::attnmap(&load(&config)?, &slide, corpus, checkpoint, model)?
        }
        Command::EvalSurvival { config, scores, survival, out } => {
            let cfg = match config {
                Some(p) => load(&p)?,
                None => config::RunConfig::fallback(seed)?,
            };
            commands::eval_survival(&cfg, &scores, &survival, out)?
        }
        Command::Verify { points, instances, corrupt_gradient } => {
            let opts = elf_core::verify::VerifyOptions { points, instances, seed: seed.unwrap_or(0), corrupt_gradient };
            commands::verify(&opts)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("elf: {e}"),
                Failure::Verification(names) => eprintln!("elf: verification failed: {}", names.join(", ")),
            }
            ExitCode::from(f.code())
        }
    }
}
