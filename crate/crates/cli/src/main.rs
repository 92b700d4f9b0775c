//! `charlab`: dataset preparation, training, evaluation, baselines, analyses
//! and oracle reports from one binary. Every command writes into a
//! content-addressed run directory with a `run.json` manifest and prints a
//! JSON summary on stdout. Failures print `{"error": {...}}` on stderr and
//! exit with status 1.

mod commands;
mod data;
mod run;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use charlab::cells::CellKind;
use charlab::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "charlab", version, about = "Character-level language modeling lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Directory under which run directories are created.
    #[arg(long, default_value = "runs", global = true)]
    pub out_root: PathBuf,
}

#[derive(Args, Clone)]
pub struct TrainOpts {
    /// Prepared dataset directory (from `charlab prep`).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; missing keys take the defaults listed below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Train once per `dropout_grid` value and keep the best.
    #[arg(long)]
    pub cross_validate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, split and encode a UTF-8 text file.
    Prep {
        #[arg(long)]
        input: PathBuf,
        /// Train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Use only the first N characters.
        #[arg(long)]
        limit_chars: Option<usize>,
    },
    /// Train a recurrent model (rnn, lstm, gru).
    #[command(after_help = commands::train_defaults_help())]
    Train {
        #[arg(long, default_value = "lstm")]
        kind: CellKind,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Train the windowed feed-forward n-NN baseline.
    #[command(after_help = commands::train_defaults_help())]
    Nnn {
        /// Number of previous characters in the input window.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        hidden: usize,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Train the kinds × layers × sizes grid with equal parameter budgets.
    #[command(after_help = commands::train_defaults_help())]
    Grid {
        #[arg(long, value_delimiter = ',', default_value = "rnn,lstm,gru")]
        kinds: Vec<CellKind>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        layers: Vec<usize>,
        /// LSTM hidden sizes setting each parameter budget.
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        sizes: Vec<usize>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Evaluate a checkpoint on a split: loss, bootstrap σ, per-position records.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also dump full next-character distributions.
        #[arg(long)]
        distributions: bool,
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample text from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prime: String,
        #[arg(long, default_value_t = 500)]
        length: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit Kneser-Ney n-gram models and evaluate them on a split.
    Ngram {
        #[arg(long)]
        data: PathBuf,
        /// Context lengths, e.g. `--n 1,2,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Keep the fitted model files.
        #[arg(long)]
        save_models: bool,
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analyses over checkpoints and prediction records.
    Analyze {
        #[command(subcommand)]
        which: commands::Analysis,
    },
    /// Staged oracle error breakdown of a model's prediction records.
    Oracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Records CSV of the model under study.
        #[arg(long)]
        model: PathBuf,
        /// Records CSVs of the n-gram models. Repeatable.
        #[arg(long, required = true)]
        ngram: Vec<PathBuf>,
        /// JSON oracle config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-slice differences between two oracle breakdowns.
    OracleCompare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Empty(_) => "empty",
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::OutOfVocabulary(_) => "out_of_vocabulary",
        Error::IdOutOfRange { .. } => "id_out_of_range",
        Error::NonFinite { .. } => "non_finite",
        Error::Diverged { .. } => "diverged",
        Error::Encoding { .. } => "encoding",
        Error::Format { .. } => "format",
        Error::Mismatch(_) => "mismatch",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Prep {
            input,
            ratios,
            limit_chars,
        } => commands::prep(&common, &input, &ratios, limit_chars),
        Command::Train {
            kind,
            layers,
            hidden,
            opts,
        } => commands::train(&common, "train", kind, layers, hidden, 0, &opts),
        Command::Nnn { n, hidden, opts } => commands::train(&common, "nnn", CellKind::Nnn, 1, hidden, n, &opts),
        Command::Grid {
            kinds,
            layers,
            sizes,
            opts,
        } => commands::grid(&common, &kinds, &layers, &sizes, &opts),
        Command::Eval {
            checkpoint,
            data,
            split,
            distributions,
            bootstrap,
            seed,
        } => commands::eval(&common, &checkpoint, &data, &split, distributions, bootstrap, seed),
        Command::Sample {
            checkpoint,
            prime,
            length,
            temperature,
            seed,
        } => commands::sample(&common, &checkpoint, &prime, length, temperature, seed),
        Command::Ngram {
            data,
            n,
            split,
            save_models,
            bootstrap,
            seed,
        } => commands::ngram(&common, &data, &n, &split, save_models, bootstrap, seed),
        Command::Analyze { which } => commands::analyze(&common, which),
        Command::Oracle {
            data,
            split,
            model,
            ngram,
            config,
            overrides,
        } => commands::oracle(&common, &data, &split, &model, &ngram, config.as_deref(), &overrides),
        Command::OracleCompare { a, b } => commands::oracle_compare(&common, &a, &b),
    };
    match result {
        Ok(summary) => {
            // A closed pipe (e.g. `| head`) is not a failure of the run itself.
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": error_kind(&e), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
