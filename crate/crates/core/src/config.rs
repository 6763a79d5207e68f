//! Run configuration files.
//!
//! Flat `key = value` lines with dotted section prefixes; `#` starts a
//! comment. Every key except the dataset paths has a default:
//!
//! ```text
//! data.train = train.tsv
//! data.dev = dev.tsv
//! model.branches = 1:100,3:100,5:100
//! train.epochs = 30
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use crate::encoder::{format_branches, parse_branches, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, DEFAULT_EMBED_DIM, DEFAULT_EMBED_INIT_RANGE, DEFAULT_SEQ_LEN};
use crate::tensor::Activation;
use crate::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub attention: bool,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub embed_init_range: f64,
    pub train: TrainConfig,
    pub min_count: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub attention_dump: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            dev_path: None,
            test_path: None,
            encoder: EncoderConfig::default(),
            attention: true,
            embed_dim: DEFAULT_EMBED_DIM,
            seq_len: DEFAULT_SEQ_LEN,
            embed_init_range: DEFAULT_EMBED_INIT_RANGE,
            train: TrainConfig::default(),
            min_count: 1,
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train.log.jsonl"),
            attention_dump: PathBuf::from("attention.jsonl"),
        }
    }
}

pub const KEYS: [&str; 24] = [
    "data.train",
    "data.dev",
    "data.test",
    "model.variant",
    "model.branches",
    "model.width",
    "model.channels",
    "model.layers",
    "model.activation",
    "model.attention",
    "model.embed_dim",
    "model.seq_len",
    "model.embed_init_range",
    "train.margin",
    "train.learning_rate",
    "train.dropout",
    "train.epochs",
    "train.negatives_per_positive",
    "train.seed",
    "train.min_count",
    "train.adagrad_eps",
    "output.checkpoint",
    "output.log",
    "output.attention",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses config text; relative paths, including the default outputs,
    /// are joined onto `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = Self::default();
        for p in [&mut cfg.checkpoint, &mut cfg.log, &mut cfg.attention_dump] {
            *p = base.join(&*p);
        }
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {lineno}: unknown key {key}")));
            }
            if let Some(prev) = seen.insert(key.to_string(), lineno) {
                return Err(Error::Config(format!(
                    "line {lineno}: {key} already set on line {prev}"
                )));
            }
            cfg.set(key, value, base)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || {
            if value.is_empty() {
                return Err(Error::Config(format!("{key} is empty")));
            }
            Ok(base.join(value))
        };
        match key {
            "data.train" => self.train_path = Some(path()?),
            "data.dev" => self.dev_path = Some(path()?),
            "data.test" => self.test_path = Some(path()?),
            "model.variant" => self.encoder.variant = EncoderVariant::from_str(value)?,
            "model.branches" => self.encoder.branches = parse_branches(value)?,
            "model.width" => self.encoder.width = parse(key, value)?,
            "model.channels" => self.encoder.channels = parse(key, value)?,
            "model.layers" => self.encoder.layers = parse(key, value)?,
            "model.activation" => self.encoder.activation = Activation::from_str(value)?,
            "model.attention" => self.attention = parse(key, value)?,
            "model.embed_dim" => self.embed_dim = parse(key, value)?,
            "model.seq_len" => self.seq_len = parse(key, value)?,
            "model.embed_init_range" => self.embed_init_range = parse(key, value)?,
            "train.margin" => self.train.margin = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.dropout" => self.train.dropout = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.negatives_per_positive" => self.train.negatives_per_positive = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.min_count" => self.min_count = parse(key, value)?,
            "train.adagrad_eps" => self.train.adagrad_eps = parse(key, value)?,
            "output.checkpoint" => self.checkpoint = path()?,
            "output.log" => self.log = path()?,
            "output.attention" => self.attention_dump = path()?,
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(2)?;
        self.train.validate()?;
        if self.min_count == 0 {
            return Err(Error::Config("train.min_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            seq_len: self.seq_len,
            embed_init_range: self.embed_init_range,
            encoder: self.encoder.clone(),
            attention: self.attention,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether a model built from this config would match `model`
    /// (vocabulary size aside).
    pub fn matches_model(&self, model: &ModelConfig) -> bool {
        let mut mine = match self.model_config(model.vocab_size) {
            Ok(c) => c,
            Err(_) => return false,
        };
        // fields the variant ignores do not matter
        if mine.encoder.variant == EncoderVariant::Msnn {
            mine.encoder.width = model.encoder.width;
            mine.encoder.channels = model.encoder.channels;
            mine.encoder.layers = model.encoder.layers;
        } else {
            mine.encoder.branches = model.encoder.branches.clone();
            if mine.encoder.variant == EncoderVariant::SingleCnn {
                mine.encoder.layers = model.encoder.layers;
            }
        }
        &mine == model
    }

    pub fn require_train_paths(&self) -> Result<(&Path, &Path)> {
        let train = self
            .train_path
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key data.train".into()))?;
        let dev = self
            .dev_path
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key data.dev".into()))?;
        Ok((train, dev))
    }

    /// Every setting with defaults filled in, in a fixed order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        vec![
            ("data.train", p(&self.train_path)),
            ("data.dev", p(&self.dev_path)),
            ("data.test", p(&self.test_path)),
            ("model.variant", self.encoder.variant.to_string()),
            ("model.branches", format_branches(&self.encoder.branches)),
            ("model.width", self.encoder.width.to_string()),
            ("model.channels", self.encoder.channels.to_string()),
            ("model.layers", self.encoder.layers.to_string()),
            ("model.activation", self.encoder.activation.to_string()),
            ("model.attention", self.attention.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.seq_len", self.seq_len.to_string()),
            ("model.embed_init_range", self.embed_init_range.to_string()),
            ("train.margin", t.margin.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.negatives_per_positive", t.negatives_per_positive.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.min_count", self.min_count.to_string()),
            ("train.adagrad_eps", t.adagrad_eps.to_string()),
            ("output.checkpoint", self.checkpoint.display().to_string()),
            ("output.log", self.log.display().to_string()),
            ("output.attention", self.attention_dump.display().to_string()),
        ]
    }

    /// Config text that parses back to `self`; unset data paths are left out.
    pub fn to_text(&self) -> String {
        self.resolved()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse_str(
            "# comment\ndata.train = a.tsv\n\nmodel.branches = 3:4 # trailing\ntrain.seed=9\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.train_path.as_deref(), Some(Path::new("/base/a.tsv")));
        assert_eq!(cfg.encoder.branches.len(), 1);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.dropout, 0.3);
        assert_eq!(cfg.train.negatives_per_positive, 5);
        assert!(cfg.require_train_paths().unwrap_err().to_string().contains("data.dev"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let base = Path::new("");
        assert!(RunConfig::parse_str("model.colour = red\n", base).unwrap_err().to_string().contains("model.colour"));
        assert!(RunConfig::parse_str("train.seed = 1\ntrain.seed = 2\n", base).is_err());
        assert!(RunConfig::parse_str("train.seed\n", base).is_err());
        assert!(RunConfig::parse_str("train.seed = x\n", base).is_err());
        assert!(RunConfig::parse_str("model.variant = rnn\n", base).is_err());
    }

    #[test]
    fn resolved_text_parses_back() {
        let mut cfg = RunConfig::parse_str("data.train = /t.tsv\ndata.dev = /d.tsv\ndata.test = /x.tsv\n", Path::new("")).unwrap();
        cfg.train.margin = 0.35;
        let again = RunConfig::parse_str(&cfg.to_text(), Path::new("")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.resolved().len(), KEYS.len());
    }

    #[test]
    fn model_match_ignores_unused_fields() {
        let cfg = RunConfig::default();
        let mut model = cfg.model_config(10).unwrap();
        assert!(cfg.matches_model(&model));
        model.encoder.width = 7;
        assert!(cfg.matches_model(&model));
        model.embed_dim = 5;
        assert!(!cfg.matches_model(&model));
    }
}
