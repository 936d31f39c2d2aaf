//! `key = value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use membart_core::data::Task;
use membart_core::memory::MemoryAttention;
use membart_core::model::{ModelConfig, Variant};
use membart_core::tensor::DType;
use membart_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Flat string view of a configuration. Every known key is always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap(BTreeMap<String, String>);

fn default_map() -> BTreeMap<String, String> {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let pairs: Vec<(&str, String)> = vec![
        ("model.variant", m.variant.to_string()),
        ("model.encoder_layers", m.encoder_layers.to_string()),
        ("model.decoder_layers", m.decoder_layers.to_string()),
        ("model.hidden_size", m.hidden_size.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.memory_size", m.memory_size.to_string()),
        ("model.vocab_size", m.vocab_size.to_string()),
        ("model.max_positions", m.max_positions.to_string()),
        ("model.ffn_expansion", m.ffn_expansion.to_string()),
        ("model.memory_attention", m.memory_attention.name().to_string()),
        ("train.learning_rate", t.learning_rate.to_string()),
        ("train.warmup_steps", t.warmup_steps.to_string()),
        ("train.weight_decay", t.weight_decay.to_string()),
        ("train.dropout", t.dropout.to_string()),
        ("train.horizon", t.horizon.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.steps", t.max_steps.to_string()),
        ("train.clip_norm", t.clip_norm.to_string()),
        ("train.precision", t.precision.to_string()),
        ("train.seed", t.seed.to_string()),
        ("data.task", Task::Recall.to_string()),
        ("data.context", "16".into()),
        ("data.overlap", "0".into()),
        ("data.mask_ratio", "0.3".into()),
        ("data.corpus", String::new()),
        ("data.segs_per_doc", "3".into()),
        ("data.min_len", "1".into()),
        ("data.eval_docs", "64".into()),
        ("run.out", "runs/default".into()),
        ("run.checkpoint", String::new()),
        ("run.checkpoint_every", "0".into()),
        ("run.log_every", "1".into()),
        ("run.no_history", "false".into()),
        ("bench.turns", "1,2,4,8".into()),
        ("bench.tokens", "8,16".into()),
        ("bench.memory", "0,4".into()),
        ("bench.truncation", "16".into()),
        ("bench.repeats", "10".into()),
        (
            "compare.variants",
            "membart,memformer_insert,memformer_rezero,membart_shared".into(),
        ),
        ("compare.threshold", "0.05".into()),
        ("compare.smoothing", "0.9".into()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap(default_map())
    }
}

impl ConfigMap {
    /// Defaults overlaid with the lines of a config file.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            map.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.0.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        &self.0[key]
    }

    /// One `key = value` line per key, sorted.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| CliError::Usage(format!("{key} = {v:?}: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("{key}: {s:?}: {e}"))))
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: Task,
    /// Segment length in tokens.
    pub context: usize,
    pub overlap: usize,
    pub mask_ratio: f64,
    /// Manifest of corpus files; synthetic data when absent.
    pub corpus: Option<PathBuf>,
    pub segs_per_doc: usize,
    pub min_len: usize,
    pub eval_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub no_history: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub turns: Vec<usize>,
    pub tokens: Vec<usize>,
    pub memory: Vec<usize>,
    pub truncation: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
    pub threshold: f64,
    /// Exponential smoothing factor of the loss curve.
    pub smoothing: f64,
}

/// Typed, validated view of a [`ConfigMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunPaths,
    pub bench: BenchConfig,
    pub compare: CompareConfig,
    map: ConfigMap,
}

fn parse_precision(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(CliError::Usage(format!("train.precision = {s:?}: expected f32 or f64"))),
    }
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("{key} = {s:?}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn from_map(map: ConfigMap) -> Result<Self> {
        let model = ModelConfig {
            variant: map.parse::<Variant>("model.variant")?,
            encoder_layers: map.parse("model.encoder_layers")?,
            decoder_layers: map.parse("model.decoder_layers")?,
            hidden_size: map.parse("model.hidden_size")?,
            heads: map.parse("model.heads")?,
            memory_size: map.parse("model.memory_size")?,
            vocab_size: map.parse("model.vocab_size")?,
            max_positions: map.parse("model.max_positions")?,
            ffn_expansion: map.parse("model.ffn_expansion")?,
            memory_attention: map.parse::<MemoryAttention>("model.memory_attention")?,
        };
        let train = TrainConfig {
            learning_rate: map.parse("train.learning_rate")?,
            warmup_steps: map.parse("train.warmup_steps")?,
            weight_decay: map.parse("train.weight_decay")?,
            dropout: map.parse("train.dropout")?,
            horizon: map.parse("train.horizon")?,
            batch_size: map.parse("train.batch_size")?,
            max_steps: map.parse("train.steps")?,
            clip_norm: map.parse("train.clip_norm")?,
            precision: parse_precision(map.get("train.precision"))?,
            seed: map.parse("train.seed")?,
        };
        let data = DataConfig {
            task: map.parse::<Task>("data.task")?,
            context: map.parse("data.context")?,
            overlap: map.parse("data.overlap")?,
            mask_ratio: map.parse("data.mask_ratio")?,
            corpus: map.path("data.corpus"),
            segs_per_doc: map.parse("data.segs_per_doc")?,
            min_len: map.parse("data.min_len")?,
            eval_docs: map.parse("data.eval_docs")?,
        };
        let run = RunPaths {
            out: PathBuf::from(map.get("run.out")),
            checkpoint: map.path("run.checkpoint"),
            checkpoint_every: map.parse("run.checkpoint_every")?,
            log_every: map.parse("run.log_every")?,
            no_history: parse_bool("run.no_history", map.get("run.no_history"))?,
        };
        let bench = BenchConfig {
            turns: map.list("bench.turns")?,
            tokens: map.list("bench.tokens")?,
            memory: map.list("bench.memory")?,
            truncation: map.parse("bench.truncation")?,
            repeats: map.parse("bench.repeats")?,
        };
        let compare = CompareConfig {
            variants: map.list("compare.variants")?,
            threshold: map.parse("compare.threshold")?,
            smoothing: map.parse("compare.smoothing")?,
        };
        let cfg = RunConfig {
            model,
            train,
            data,
            run,
            bench,
            compare,
            map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.context == 0 || d.overlap >= d.context {
            return Err(CliError::Usage(format!(
                "data.context {} must be positive and exceed data.overlap {}",
                d.context, d.overlap
            )));
        }
        if d.segs_per_doc == 0 || d.eval_docs == 0 {
            return Err(CliError::Usage("data.segs_per_doc and data.eval_docs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.mask_ratio) {
            return Err(CliError::Usage(format!("data.mask_ratio {} outside [0, 1]", d.mask_ratio)));
        }
        // Recall and lm targets are a full segment; decoder inputs add BOS.
        if d.context + 1 > self.model.max_positions {
            return Err(CliError::Usage(format!(
                "data.context {} needs more than model.max_positions {}",
                d.context, self.model.max_positions
            )));
        }
        if d.corpus.is_some() && self.model.vocab_size < membart_core::data::BYTE_VOCAB {
            return Err(CliError::Usage(format!(
                "byte corpora need model.vocab_size >= {}",
                membart_core::data::BYTE_VOCAB
            )));
        }
        for p in d.corpus.iter().chain(self.run.checkpoint.iter()) {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        if self.bench.turns.is_empty() || self.bench.tokens.is_empty() || self.bench.memory.is_empty() {
            return Err(CliError::Usage("bench grid lists must be non-empty".into()));
        }
        if self.bench.repeats < 3 {
            return Err(CliError::Usage("bench.repeats must be at least 3".into()));
        }
        if self.compare.variants.is_empty() {
            return Err(CliError::Usage("compare.variants is empty".into()));
        }
        if !(0.0..1.0).contains(&self.compare.smoothing) {
            return Err(CliError::Usage("compare.smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn map(&self) -> &ConfigMap {
        &self.map
    }

    /// The effective configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        self.map.to_text()
    }

    /// SHA-256 of the canonical model architecture text. Training settings do
    /// not enter it, so a checkpoint can be evaluated or resumed under
    /// different run options.
    pub fn digest(&self) -> [u8; 32] {
        model_digest(&self.model)
    }
}

pub fn model_digest(model: &ModelConfig) -> [u8; 32] {
    Sha256::digest(model.canonical_text().as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
