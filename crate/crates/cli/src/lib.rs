//! Command-line driver for the relevance pipeline and the HTTP scoring
//! service.

pub mod commands;
pub mod config;
pub mod server;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "searchrel", version, about = "Train, distill, evaluate and serve query-pin relevance models")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true, env = "SEARCHREL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding every stage's inputs and outputs.
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic raw corpus with oracle labels.
    SynthGen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        n_pins: Option<usize>,
    },
    /// Validate raw files, fold engagement into pins, build the vocabulary.
    Ingest {
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Build per-field BM25 statistics over the pin corpus.
    BuildIndex,
    /// Train the cross-encoder teacher on rater labels.
    TrainTeacher {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Label logged training-query pairs with the teacher.
    DistillLabel,
    /// Draw a class-balanced sample of teacher labels.
    Sample {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the student on labeled examples.
    TrainStudent {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a student on the held-out queries.
    Eval {
        #[arg(long)]
        student: Option<PathBuf>,
        /// Oracle labels to evaluate against instead of rater labels.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train students on growing distilled samples and a rater-label baseline.
    ScaleReport {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Serve the student over HTTP.
    Serve {
        #[arg(long, env = "SEARCHREL_LISTEN")]
        listen: Option<String>,
    },
}

/// Merges the config file and global flags.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::SynthGen { out, n_queries, n_pins } => {
            if let Some(n) = n_queries {
                cfg.synthetic.n_queries = n;
            }
            if let Some(n) = n_pins {
                cfg.synthetic.n_pins = n;
            }
            commands::synth_gen(&cfg, out)
        }
        Command::Ingest { raw } => commands::ingest(&cfg, raw),
        Command::BuildIndex => commands::build_index(&cfg),
        Command::TrainTeacher { epochs, truth } => {
            if let Some(e) = epochs {
                cfg.teacher.train.epochs = e;
            }
            commands::train_teacher_cmd(&cfg, truth)
        }
        Command::DistillLabel => commands::distill_label(&cfg),
        Command::Sample { size, labels, out } => commands::sample(&cfg, size, labels, out),
        Command::TrainStudent { labels, out, epochs } => {
            if let Some(e) = epochs {
                cfg.student.train.epochs = e;
            }
            commands::train_student_cmd(&cfg, labels, out)
        }
        Command::Eval { student, truth, out } => commands::eval(&cfg, student, truth, out).map(|_| ()),
        Command::ScaleReport { sizes, labels, truth } => commands::scale_report(&cfg, sizes, labels, truth),
        Command::Serve { listen } => commands::serve(&cfg, listen),
    }
}
