//! Run configuration: a flat `key = value` file with `#` comments, overridable
//! from the command line.

use std::path::{Path, PathBuf};

use fedcode::coder::PqConfig;
use fedcode::data::SyntheticConfig;
use fedcode::encoder::EncoderConfig;
use fedcode::orchestrator::{FederationConfig, FinetuneConfig, ModelConfig};
use fedcode::privacy::NoiseMode;
use fedcode::prompts::{PromptConfig, PromptMode};
use fedcode::server::RectifierMode;
use fedcode::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Files,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("split must be valid or test, got `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub source: DataSource,
    pub data_dir: PathBuf,
    pub domains: Vec<String>,
    /// Directory holding `{domain}.pfcc` code files; items are coded in
    /// process when unset.
    pub codes_dir: Option<PathBuf>,
    pub min_interactions: usize,
    pub synthetic: SyntheticConfig,
    pub pq: PqConfig,
    pub encoder: EncoderConfig,
    pub dropout: f64,
    pub fed: FederationConfig,
    pub transport: TransportKind,
    pub prompt: PromptConfig,
    pub finetune: FinetuneConfig,
    pub split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            source: DataSource::Files,
            data_dir: PathBuf::from("data"),
            domains: vec!["source".into(), "target".into()],
            codes_dir: None,
            min_interactions: 5,
            synthetic: SyntheticConfig::default(),
            pq: PqConfig::default(),
            encoder: EncoderConfig::default(),
            dropout: 0.0,
            fed: FederationConfig::default(),
            transport: TransportKind::Loopback,
            prompt: PromptConfig::default(),
            finetune: FinetuneConfig::default(),
            split: Split::Test,
        }
    }
}

/// Every accepted key, in the order `to_pairs` emits them.
pub const KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.dir",
    "data.domains",
    "data.codes",
    "data.min_interactions",
    "synthetic.users",
    "synthetic.items",
    "synthetic.min_len",
    "synthetic.max_len",
    "synthetic.clusters",
    "synthetic.dim",
    "synthetic.spread",
    "synthetic.follow_prob",
    "pq.codebooks",
    "pq.centroids",
    "pq.iters",
    "model.d_model",
    "model.heads",
    "model.layers",
    "model.max_len",
    "model.dropout",
    "fed.rounds",
    "fed.local_epochs",
    "fed.lr",
    "fed.batch_size",
    "fed.alpha",
    "fed.patience",
    "fed.transport",
    "enc.mode",
    "enc.tau",
    "enc.bits",
    "enc.epsilon",
    "enc.rectifier",
    "prompt.mode",
    "prompt.context_words",
    "prompt.heads",
    "prompt.upe_layers",
    "prompt.upe_heads",
    "finetune.epochs",
    "finetune.lr",
    "finetune.batch_size",
    "finetune.patience",
    "eval.split",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn pair(key: &str, v: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([num(key, a)?, num(key, b)?]),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got `{v}`"))),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given, then with `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "data.source" => {
                self.source = match v {
                    "files" => DataSource::Files,
                    "synthetic" => DataSource::Synthetic,
                    _ => return Err(Error::Config(format!("{key}: expected files or synthetic, got `{v}`"))),
                }
            }
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.domains" => {
                self.domains = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "data.codes" => self.codes_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.min_interactions" => self.min_interactions = num(key, v)?,
            "synthetic.users" => self.synthetic.users = pair(key, v)?,
            "synthetic.items" => self.synthetic.items = pair(key, v)?,
            "synthetic.min_len" => self.synthetic.min_len = num(key, v)?,
            "synthetic.max_len" => self.synthetic.max_len = num(key, v)?,
            "synthetic.clusters" => self.synthetic.clusters = num(key, v)?,
            "synthetic.dim" => self.synthetic.dim = num(key, v)?,
            "synthetic.spread" => self.synthetic.spread = num(key, v)?,
            "synthetic.follow_prob" => self.synthetic.follow_prob = num(key, v)?,
            "pq.codebooks" => self.pq.codebooks = num(key, v)?,
            "pq.centroids" => self.pq.centroids = num(key, v)?,
            "pq.iters" => self.pq.kmeans_iters = num(key, v)?,
            "model.d_model" => self.encoder.d_model = num(key, v)?,
            "model.heads" => self.encoder.heads = num(key, v)?,
            "model.layers" => self.encoder.layers = num(key, v)?,
            "model.max_len" => self.encoder.max_len = num(key, v)?,
            "model.dropout" => self.dropout = num(key, v)?,
            "fed.rounds" => self.fed.rounds = num(key, v)?,
            "fed.local_epochs" => self.fed.local_epochs = num(key, v)?,
            "fed.lr" => self.fed.lr_local = num(key, v)?,
            "fed.batch_size" => self.fed.batch_size = num(key, v)?,
            "fed.alpha" => self.fed.alpha = num(key, v)?,
            "fed.patience" => self.fed.patience = num(key, v)?,
            "fed.transport" => {
                self.transport = match v {
                    "loopback" => TransportKind::Loopback,
                    "files" => TransportKind::Files,
                    _ => return Err(Error::Config(format!("{key}: expected loopback or files, got `{v}`"))),
                }
            }
            "enc.mode" => self.fed.encryption.mode = NoiseMode::parse(v)?,
            "enc.tau" => self.fed.encryption.tau = num(key, v)?,
            "enc.bits" => self.fed.encryption.k_bits = num(key, v)?,
            "enc.epsilon" => self.fed.encryption.epsilon = num(key, v)?,
            "enc.rectifier" => {
                self.fed.rectifier = match v {
                    "literal" => RectifierMode::Literal,
                    "unit" => RectifierMode::Unit,
                    _ => return Err(Error::Config(format!("{key}: expected literal or unit, got `{v}`"))),
                }
            }
            "prompt.mode" => self.prompt.mode = PromptMode::parse(v)?,
            "prompt.context_words" => self.prompt.context_words = num(key, v)?,
            "prompt.heads" => self.prompt.heads = num(key, v)?,
            "prompt.upe_layers" => self.prompt.upe_layers = num(key, v)?,
            "prompt.upe_heads" => self.prompt.upe_heads = num(key, v)?,
            "finetune.epochs" => self.finetune.epochs = num(key, v)?,
            "finetune.lr" => self.finetune.lr = num(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = num(key, v)?,
            "finetune.patience" => self.finetune.patience = num(key, v)?,
            "eval.split" => self.split = Split::parse(v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The value of every key, as it would be written in a config file.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.fed.encryption;
        let values = [
            self.seed.to_string(),
            match self.source {
                DataSource::Files => "files".into(),
                DataSource::Synthetic => "synthetic".into(),
            },
            self.data_dir.display().to_string(),
            self.domains.join(","),
            self.codes_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.min_interactions.to_string(),
            format!("{},{}", self.synthetic.users[0], self.synthetic.users[1]),
            format!("{},{}", self.synthetic.items[0], self.synthetic.items[1]),
            self.synthetic.min_len.to_string(),
            self.synthetic.max_len.to_string(),
            self.synthetic.clusters.to_string(),
            self.synthetic.dim.to_string(),
            self.synthetic.spread.to_string(),
            self.synthetic.follow_prob.to_string(),
            self.pq.codebooks.to_string(),
            self.pq.centroids.to_string(),
            self.pq.kmeans_iters.to_string(),
            self.encoder.d_model.to_string(),
            self.encoder.heads.to_string(),
            self.encoder.layers.to_string(),
            self.encoder.max_len.to_string(),
            self.dropout.to_string(),
            self.fed.rounds.to_string(),
            self.fed.local_epochs.to_string(),
            self.fed.lr_local.to_string(),
            self.fed.batch_size.to_string(),
            self.fed.alpha.to_string(),
            self.fed.patience.to_string(),
            match self.transport {
                TransportKind::Loopback => "loopback".into(),
                TransportKind::Files => "files".into(),
            },
            e.mode.as_str().into(),
            e.tau.to_string(),
            e.k_bits.to_string(),
            e.epsilon.to_string(),
            match self.fed.rectifier {
                RectifierMode::Literal => "literal".into(),
                RectifierMode::Unit => "unit".into(),
            },
            self.prompt.mode.as_str().into(),
            self.prompt.context_words.to_string(),
            self.prompt.heads.to_string(),
            self.prompt.upe_layers.to_string(),
            self.prompt.upe_heads.to_string(),
            self.finetune.epochs.to_string(),
            self.finetune.lr.to_string(),
            self.finetune.batch_size.to_string(),
            self.finetune.patience.to_string(),
            self.split.as_str().into(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Pushes the master seed into every seeded component.
    fn sync_seeds(&mut self) {
        self.pq.seed = self.seed;
        self.fed.seed = self.seed;
        self.fed.encryption.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    /// Checks everything that can be checked before any data is read.
    pub fn validate(&mut self) -> Result<()> {
        self.sync_seeds();
        if self.dropout != 0.0 {
            return Err(Error::Config(format!(
                "model.dropout: only 0 is supported, got {}",
                self.dropout
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("data.domains: no domains listed".into()));
        }
        let mut sorted = self.domains.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.domains.len() {
            return Err(Error::Config("data.domains: duplicate domain".into()));
        }
        if self.source == DataSource::Synthetic {
            if self.domains.len() != 2 {
                return Err(Error::Config(
                    "data.domains: the synthetic generator makes exactly two domains".into(),
                ));
            }
            self.synthetic.domains = [self.domains[0].clone(), self.domains[1].clone()];
        }
        if self.min_interactions == 0 {
            return Err(Error::Config("data.min_interactions must be at least 1".into()));
        }
        if self.pq.codebooks == 0 || self.pq.centroids == 0 || self.pq.centroids > usize::from(u16::MAX) {
            return Err(Error::Config(format!(
                "pq: bad shape {} x {}",
                self.pq.codebooks, self.pq.centroids
            )));
        }
        self.encoder.validate()?;
        self.fed.validate()?;
        if self.finetune.batch_size == 0 || self.finetune.patience == 0 {
            return Err(Error::Config(
                "finetune.batch_size and finetune.patience must be positive".into(),
            ));
        }
        if !(self.finetune.lr >= 0.0 && self.finetune.lr.is_finite()) {
            return Err(Error::Config(format!("finetune.lr: bad value {}", self.finetune.lr)));
        }
        if self.prompt.heads == 0 || self.encoder.d_model % self.prompt.heads != 0 {
            return Err(Error::Config(format!(
                "prompt.heads {} must divide model.d_model {}",
                self.prompt.heads, self.encoder.d_model
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            codebooks: self.pq.codebooks,
            centroids: self.pq.centroids,
            encoder: self.encoder,
        }
    }
}
