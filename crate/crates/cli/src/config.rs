//! Pipeline configuration: one TOML file plus command-line overrides.
//!
//! Every key is optional; missing keys take the defaults below. Relative
//! paths inside a config file are resolved against the file's directory,
//! relative paths given as flags against the working directory.
//!
//! ```toml
//! seed = 0                  # model, adapter, training and probe seed
//! batch_size = 16           # inference batch size
//! cache_dir = "cache"       # optional embedding cache
//! output = "report.json"    # artifact path (stdout for reports when absent)
//!
//! [backend]
//! kind = "reference"        # the built-in reference transformer
//! checkpoint = "ckpt.json"  # optional adapter checkpoint from train-cse
//!
//! [method]
//! kind = "prompt_eol"       # avg_tokens | prompt_last | prompt_eol
//! demo_sentence = "..."     # both demo keys together select PromptEOL+ICL
//! demo_word = "..."
//!
//! [data]
//! sentences = "in.txt"                 # embed: one sentence per line
//! sts = { stsb = "stsb.tsv" }          # eval-sts: name -> score<TAB>a<TAB>b
//! transfer.mr = { train = "mr.train.tsv", test = "mr.test.tsv" }
//! demo_set = "demos.json"              # search-demo candidates
//! dev = "dev.tsv"                      # search-demo dev pairs
//! dictionary = "dict.tsv"              # build-demos: word<TAB>definition
//! label_sentences = "sentences.txt"    # build-demos: sentences to label
//! nli = "nli.csv"                      # train-cse: sent0,sent1,hard_neg
//!
//! [train]                   # temperature, learning_rate, epochs, batch_size,
//! [train.lora]              # rank, alpha, dropout, quantize_base
//! [transfer]                # l2_grid, holdout_fraction, epochs, lr
//! [search]                  # bins
//! [build]                   # labeler ("reference"), dictionary_only, allow_partial
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sentemb::eval::TransferHyperparams;
use sentemb::train::TrainConfig;
use sentemb::MethodKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub cache_dir: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub backend: BackendConfig,
    pub method: MethodConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub transfer: TransferHyperparams,
    pub search: SearchConfig,
    pub build: BuildConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            cache_dir: None,
            output: None,
            backend: BackendConfig::default(),
            method: MethodConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            transfer: TransferHyperparams::default(),
            search: SearchConfig::default(),
            build: BuildConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: String,
    pub checkpoint: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "reference".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: String,
    pub demo_sentence: Option<String>,
    pub demo_word: Option<String>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            kind: "prompt_eol".into(),
            demo_sentence: None,
            demo_word: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sentences: Option<PathBuf>,
    pub sts: BTreeMap<String, PathBuf>,
    pub transfer: BTreeMap<String, TransferPaths>,
    pub demo_set: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub label_sentences: Option<PathBuf>,
    pub nli: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub bins: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Backend used to label sentences; `None` means no labeler is available.
    pub labeler: Option<String>,
    pub dictionary_only: bool,
    pub allow_partial: bool,
}

fn rebase(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

fn rebase_opt(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        rebase(base, p);
    }
}

impl PipelineConfig {
    /// Reads a config file, resolving its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        rebase_opt(base, &mut self.cache_dir);
        rebase_opt(base, &mut self.output);
        rebase_opt(base, &mut self.backend.checkpoint);
        let d = &mut self.data;
        for p in [
            &mut d.sentences,
            &mut d.demo_set,
            &mut d.dev,
            &mut d.dictionary,
            &mut d.label_sentences,
            &mut d.nli,
        ] {
            rebase_opt(base, p);
        }
        for p in d.sts.values_mut() {
            rebase(base, p);
        }
        for t in d.transfer.values_mut() {
            rebase(base, &mut t.train);
            rebase(base, &mut t.test);
        }
    }

    /// Propagates the top-level seed into every seeded section and rejects
    /// unknown backend or method kinds before any input is read.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.transfer.seed = self.seed;
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.backend.kind != "reference" {
            return Err(CliError::Config(format!(
                "unknown backend kind {:?} (available: \"reference\")",
                self.backend.kind
            )));
        }
        self.method.kind.parse::<MethodKind>().map_err(CliError::Config)?;
        if self.method.demo_sentence.is_some() != self.method.demo_word.is_some() {
            return Err(CliError::Config(
                "method.demo_sentence and method.demo_word must be given together".into(),
            ));
        }
        Ok(self)
    }

    /// The effective configuration as JSON, embedded in every artifact.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn require_output(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("no output path (set `output` or pass --output)".into()))
    }
}
