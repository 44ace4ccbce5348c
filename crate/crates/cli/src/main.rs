//! `evident`: batch driver for corpus preparation, evidence retrieval,
//! labelling, training, evaluation and the annotation service.

mod backends;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use backends::BackendArgs;

/// Exit status for invalid arguments or flag combinations.
const EXIT_USAGE: u8 = 1;
/// Exit status for unreadable or inconsistent input data.
const EXIT_DATA: u8 = 2;
/// Exit status for completion or embedding backend failures.
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(name = "evident", version, about = "Interpretable risk prediction from clinical notes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Report corpus (JSON Lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Split assignment file written by `ingest`.
    #[arg(long)]
    splits: PathBuf,
    /// Split(s) to process: a name, a comma list, or `all`.
    #[arg(long, default_value = "train")]
    split: String,
    /// Records with more reports than this are dropped.
    #[arg(long, default_value_t = evident_core::pipeline::DEFAULT_MAX_REPORTS)]
    max_reports: usize,
}

#[derive(Args, Clone)]
struct ScoredArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Evidence file (JSON Lines).
    #[arg(long)]
    evidence: PathBuf,
    /// Label file (JSON Lines).
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write or check its patient split assignment.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Existing split file to validate; one is generated when absent.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Where to write generated splits.
        #[arg(long, required_unless_present = "splits")]
        out_splits: Option<PathBuf>,
        /// Train, validation, test and annotation fractions.
        #[arg(long, default_value = "0.7,0.1,0.1,0.1")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic corpus with planted conditions.
    Synth {
        /// Generator spec (JSON); the built-in three-condition spec when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Patients for the built-in spec.
        #[arg(long, default_value_t = 100)]
        patients: usize,
        /// Per-condition prevalence for the built-in spec.
        #[arg(long, default_value_t = 0.5)]
        prevalence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write mock-backend fixtures that answer the prompts truthfully.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Also write the planted conditions per patient (JSON).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Retrieve evidence snippets from each patient's past reports.
    Retrieve {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Query file (JSON); the built-in queries when absent.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Use the last N raw sentences instead of prompting.
        #[arg(long, value_name = "N", num_args = 0..=1, default_missing_value = "1000")]
        all_ehr: Option<usize>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Seeds each patient's past/future split point.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract confident-diagnosis labels from each patient's future reports.
    Label {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Cosine threshold for matching terms to conditions.
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
        /// Must match the seed given to `retrieve`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the additive model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        labels: PathBuf,
        /// Training evidence.
        #[arg(long)]
        evidence: PathBuf,
        /// Validation evidence used for checkpoint selection.
        #[arg(long)]
        validation_evidence: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Fraction of label-free training patients kept.
        #[arg(long, default_value_t = evident_core::pipeline::DEFAULT_NEGATIVE_RATE)]
        negative_rate: f64,
        /// Comma-separated condition list.
        #[arg(long)]
        conditions: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one patient's predicted risk.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        evidence: PathBuf,
        #[arg(long)]
        patient: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Print one patient's evidence in ranked order (JSON Lines).
    Rank {
        #[arg(long)]
        evidence: PathBuf,
        #[arg(long)]
        patient: String,
        /// log_odds, confidence, reverse_chronological or random.
        #[arg(long, default_value = "log_odds")]
        strategy: String,
        /// Required for log_odds.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model, or rerun the whole pipeline over several seeds.
    Eval {
        /// Model, evidence and labels to evaluate (single-model mode).
        #[arg(long, requires_all = ["evidence", "labels"], conflicts_with = "seeds")]
        model: Option<PathBuf>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Seeds for the multi-seed protocol, e.g. `0..4` (inclusive) or `0,1,2`.
        #[arg(long, requires = "corpus")]
        seeds: Option<String>,
        /// Corpus for the multi-seed protocol.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Split fractions for the multi-seed protocol.
        #[arg(long, default_value = "0.7,0.1,0.1,0.1")]
        fractions: String,
        /// Split evaluated in the multi-seed protocol.
        #[arg(long, default_value = "test")]
        split: String,
        /// Use the last N raw sentences as evidence in the multi-seed protocol.
        #[arg(long, value_name = "N", num_args = 0..=1, default_missing_value = "1000")]
        all_ehr: Option<usize>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = evident_core::eval::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics when each patient keeps only its top-k ranked evidence.
    AblateEvidence {
        #[command(flatten)]
        scored: ScoredArgs,
        #[arg(long, default_value = "1,2,5,10,20,50")]
        k: String,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = evident_core::eval::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histograms of evidence counts and per-evidence log odds.
    Histograms {
        #[command(flatten)]
        scored: ScoredArgs,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an annotation export.
    Stats {
        /// Export from the service (`GET /v1/export/annotations`).
        #[arg(long)]
        annotations: PathBuf,
        /// Count repeated evidence text only once.
        #[arg(long)]
        exclude_duplicates: bool,
        /// Usefulness breakdown CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in query list.
    Queries {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Model trained on retrieved evidence; falls back to EVIDENT_MODEL_PATH.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Model trained on raw sentences.
        #[arg(long)]
        allehr_model: Option<PathBuf>,
        /// Event-log directory; falls back to EVIDENT_STORE_DIR.
        #[arg(long)]
        store_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_USAGE,
            error: anyhow::anyhow!(message.into()),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: classify(&error),
            error,
        }
    }
}

fn classify(error: &anyhow::Error) -> u8 {
    use evident_core::embedder::EmbedError;
    use evident_core::llm::GatewayError;
    use evident_service::CatalogError;

    let backend = error.chain().any(|cause| {
        cause.downcast_ref::<evident_core::Error>().is_some_and(|e| e.is_backend())
            || matches!(
                cause.downcast_ref::<CatalogError>(),
                Some(CatalogError::Core(e)) if e.is_backend()
            )
            || cause
                .downcast_ref::<GatewayError>()
                .is_some_and(|e| !matches!(e, GatewayError::Fixture(_)))
            || matches!(cause.downcast_ref::<EmbedError>(), Some(EmbedError::Transport(_)))
    });
    if backend {
        EXIT_BACKEND
    } else {
        EXIT_DATA
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in error.chain() {
        let message = cause.to_string();
        if !text.contains(&message) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&message);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}
