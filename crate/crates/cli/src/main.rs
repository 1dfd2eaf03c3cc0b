//! `sentemb`: embed sentences, evaluate, search demonstrations, build demo
//! sets and fine-tune adapters from one TOML config plus flag overrides.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 backend error. Failures print `{"error": {...}}` on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{PipelineConfig, TransferPaths};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "sentemb", version, about = "Prompt-based sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Args, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inference batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// avg_tokens | prompt_last | prompt_eol
    #[arg(long)]
    method: Option<String>,
    /// Demonstration sentence for PromptEOL+ICL (requires --demo-word).
    #[arg(long)]
    demo_sentence: Option<String>,
    #[arg(long)]
    demo_word: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    /// Adapter checkpoint to load on top of the base model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed one sentence per line into a binary embedding file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Spearman correlation on STS datasets.
    EvalSts {
        #[command(flatten)]
        common: Common,
        /// Dataset as NAME=PATH (repeatable; adds to or replaces configured entries).
        #[arg(long = "sts", value_name = "NAME=PATH")]
        sts: Vec<String>,
    },
    /// Logistic-regression probes on frozen embeddings.
    EvalTransfer {
        #[command(flatten)]
        common: Common,
        /// Task as NAME=TRAIN,TEST (repeatable).
        #[arg(long = "task", value_name = "NAME=TRAIN,TEST")]
        tasks: Vec<String>,
    },
    /// Score every demonstration on a dev set and pick the best.
    SearchDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demo_set: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Merge dictionary entries and labeled sentences into a demonstration set.
    BuildDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[arg(long)]
        labeler: Option<String>,
        /// Ignore sentences and build from the dictionary alone.
        #[arg(long)]
        dictionary_only: bool,
        /// Write the set even when some sentences could not be labeled.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Contrastive fine-tuning of low-rank adapters on NLI triplets.
    TrainCse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nli: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Triplets per contrastive batch.
        #[arg(long)]
        train_batch_size: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        quantize_base: bool,
        /// Training log path (default: `<output>.log.json`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn split_pair<'a>(arg: &'a str, flag: &str) -> Result<(&'a str, &'a str), CliError> {
    arg.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| CliError::Config(format!("--{flag} expects NAME=VALUE, got {arg:?}")))
}

fn load_config(common: Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.batch_size, common.batch_size);
    set(&mut cfg.method.kind, common.method);
    set_opt(&mut cfg.method.demo_sentence, common.demo_sentence);
    set_opt(&mut cfg.method.demo_word, common.demo_word);
    set_opt(&mut cfg.cache_dir, common.cache_dir);
    set_opt(&mut cfg.output, common.output);
    set(&mut cfg.backend.kind, common.backend);
    set_opt(&mut cfg.backend.checkpoint, common.checkpoint);
    Ok(cfg)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Embed { common, input } => {
            let mut cfg = load_config(common)?;
            set_opt(&mut cfg.data.sentences, input);
            commands::embed(&cfg.resolve()?)
        }
        Command::EvalSts { common, sts } => {
            let mut cfg = load_config(common)?;
            for arg in &sts {
                let (name, path) = split_pair(arg, "sts")?;
                cfg.data.sts.insert(name.to_string(), PathBuf::from(path));
            }
            commands::eval_sts(&cfg.resolve()?)
        }
        Command::EvalTransfer { common, tasks } => {
            let mut cfg = load_config(common)?;
            for arg in &tasks {
                let (name, paths) = split_pair(arg, "task")?;
                let (train, test) = paths
                    .split_once(',')
                    .ok_or_else(|| CliError::Config(format!("--task expects NAME=TRAIN,TEST, got {arg:?}")))?;
                cfg.data.transfer.insert(
                    name.to_string(),
                    TransferPaths {
                        train: train.into(),
                        test: test.into(),
                    },
                );
            }
            commands::eval_transfer(&cfg.resolve()?)
        }
        Command::SearchDemo {
            common,
            demo_set,
            dev,
            bins,
        } => {
            let mut cfg = load_config(common)?;
            set_opt(&mut cfg.data.demo_set, demo_set);
            set_opt(&mut cfg.data.dev, dev);
            set(&mut cfg.search.bins, bins);
            commands::search_demo(&cfg.resolve()?)
        }
        Command::BuildDemos {
            common,
            dictionary,
            sentences,
            labeler,
            dictionary_only,
            allow_partial,
        } => {
            let mut cfg = load_config(common)?;
            set_opt(&mut cfg.data.dictionary, dictionary);
            set_opt(&mut cfg.data.label_sentences, sentences);
            set_opt(&mut cfg.build.labeler, labeler);
            cfg.build.dictionary_only |= dictionary_only;
            cfg.build.allow_partial |= allow_partial;
            commands::build_demos(&cfg.resolve()?)
        }
        Command::TrainCse {
            common,
            nli,
            lr,
            epochs,
            train_batch_size,
            temperature,
            rank,
            alpha,
            dropout,
            quantize_base,
            log,
        } => {
            let mut cfg = load_config(common)?;
            set_opt(&mut cfg.data.nli, nli);
            set(&mut cfg.train.learning_rate, lr);
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.batch_size, train_batch_size);
            set(&mut cfg.train.temperature, temperature);
            set(&mut cfg.train.lora.rank, rank);
            set(&mut cfg.train.lora.alpha, alpha);
            set(&mut cfg.train.lora.dropout, dropout);
            cfg.train.lora.quantize_base |= quantize_base;
            commands::train(&cfg.resolve()?, log.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
