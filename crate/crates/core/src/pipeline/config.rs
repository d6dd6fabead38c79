use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};

use super::PipelineError;
use crate::encoder::{DEFAULT_D_EMB, DEFAULT_D_FEAT, DEFAULT_TAU};
use crate::llm::BackendKind;
use crate::rewriter::{RewardMode, Template, DEFAULT_FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    None,
    DetStyle,
    DesStyle,
    EvdRewriter,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::DetStyle, Strategy::DesStyle, Strategy::EvdRewriter];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::DetStyle => "det_style",
            Strategy::DesStyle => "des_style",
            Strategy::EvdRewriter => "evd_rewriter",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub kb: PathBuf,
    pub train_corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub dqr: PathBuf,
    /// Starting retriever; a fresh tied initialization when unset.
    pub encoder_base: Option<PathBuf>,
    pub encoder: PathBuf,
    pub policy_warmup: PathBuf,
    pub policy: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub metrics: PathBuf,

    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,

    pub tau: f64,
    pub d_feat: usize,
    pub d_emb: usize,
    pub hash_seed: u64,
    pub init_seed: u64,
    pub h: usize,
    pub k: usize,
    pub beta: f64,
    pub p: f64,
    pub min_entity_freq: usize,
    pub best_only: bool,
    pub reward: RewardMode,
    pub templates: Vec<Template>,

    pub rewriter_feature_dim: usize,
    pub rewriter_lr: f64,
    pub rewriter_warmup_epochs: usize,
    pub rewriter_align_epochs: usize,
    pub rewriter_batch: usize,

    pub encoder_lr: f64,
    pub encoder_momentum: f64,
    pub encoder_epochs: usize,
    pub encoder_batch: usize,

    pub seed: u64,
    pub strategy: Option<Strategy>,
    /// Creation time stamped on generated KB entries; wall clock when unset.
    pub timestamp: Option<DateTime<Utc>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kb: "out/kb.jsonl".into(),
            train_corpus: "data/train.jsonl".into(),
            test_corpus: "data/test.jsonl".into(),
            dqr: "out/dqr.jsonl".into(),
            encoder_base: None,
            encoder: "out/encoder.bin".into(),
            policy_warmup: "out/policy_warmup.bin".into(),
            policy: "out/policy.bin".into(),
            cache_dir: None,
            metrics: "out/metrics.jsonl".into(),
            backend: BackendKind::Mock,
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            tau: DEFAULT_TAU,
            d_feat: DEFAULT_D_FEAT,
            d_emb: DEFAULT_D_EMB,
            hash_seed: 0,
            init_seed: 0,
            h: 5,
            k: 5,
            beta: 0.2,
            p: 0.6,
            min_entity_freq: 2,
            best_only: false,
            reward: RewardMode::Score,
            templates: Template::ALL.to_vec(),
            rewriter_feature_dim: DEFAULT_FEATURE_DIM,
            rewriter_lr: 0.5,
            rewriter_warmup_epochs: 30,
            rewriter_align_epochs: 30,
            rewriter_batch: 16,
            encoder_lr: 0.05,
            encoder_momentum: 0.9,
            encoder_epochs: 5,
            encoder_batch: 32,
            seed: 0,
            strategy: None,
            timestamp: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn opt(value: &str) -> Option<&str> {
    Some(value).filter(|v| !v.is_empty())
}

impl PipelineConfig {
    /// Reads a flat `key = value` file. Blank lines and `#` comments are
    /// ignored; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            c.set(key.trim(), value.trim())?;
        }
        c.resolve_paths(base);
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        match key {
            "kb" => self.kb = v.into(),
            "train_corpus" => self.train_corpus = v.into(),
            "test_corpus" => self.test_corpus = v.into(),
            "dqr" => self.dqr = v.into(),
            "encoder_base" => self.encoder_base = opt(v).map(PathBuf::from),
            "encoder" => self.encoder = v.into(),
            "policy_warmup" => self.policy_warmup = v.into(),
            "policy" => self.policy = v.into(),
            "cache_dir" => self.cache_dir = opt(v).map(PathBuf::from),
            "metrics" => self.metrics = v.into(),
            "backend" => {
                self.backend = match v {
                    "mock" => BackendKind::Mock,
                    "remote" => BackendKind::Remote,
                    _ => return Err(PipelineError::Config(format!("backend: unknown {v:?}"))),
                }
            }
            "endpoint" => self.endpoint = opt(v).map(str::to_string),
            "model" => self.model = v.to_string(),
            "tau" => self.tau = parse(key, v)?,
            "d_feat" => self.d_feat = parse(key, v)?,
            "d_emb" => self.d_emb = parse(key, v)?,
            "hash_seed" => self.hash_seed = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "H" | "h" => self.h = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "min_entity_freq" => self.min_entity_freq = parse(key, v)?,
            "best_only" => self.best_only = parse(key, v)?,
            "reward" => {
                self.reward = match v {
                    "score" => RewardMode::Score,
                    "policy_logprob" => RewardMode::PolicyLogprob,
                    _ => return Err(PipelineError::Config(format!("reward: unknown {v:?}"))),
                }
            }
            "templates" => {
                self.templates = v
                    .split(',')
                    .map(|t| {
                        Template::parse(t.trim())
                            .ok_or_else(|| PipelineError::Config(format!("templates: unknown {t:?}")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "rewriter_feature_dim" => self.rewriter_feature_dim = parse(key, v)?,
            "rewriter_lr" => self.rewriter_lr = parse(key, v)?,
            "rewriter_warmup_epochs" => self.rewriter_warmup_epochs = parse(key, v)?,
            "rewriter_align_epochs" => self.rewriter_align_epochs = parse(key, v)?,
            "rewriter_batch" => self.rewriter_batch = parse(key, v)?,
            "encoder_lr" => self.encoder_lr = parse(key, v)?,
            "encoder_momentum" => self.encoder_momentum = parse(key, v)?,
            "encoder_epochs" => self.encoder_epochs = parse(key, v)?,
            "encoder_batch" => self.encoder_batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "strategy" | "augmentation_strategy" => {
                self.strategy = opt(v)
                    .map(|s| s.parse().map_err(PipelineError::Config))
                    .transpose()?
            }
            "timestamp" => {
                self.timestamp = opt(v)
                    .map(|s| {
                        DateTime::parse_from_rfc3339(s)
                            .map(|t| t.with_timezone(&Utc))
                            .map_err(|e| PipelineError::Config(format!("timestamp: {e}")))
                    })
                    .transpose()?
            }
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.kb,
            &mut self.train_corpus,
            &mut self.test_corpus,
            &mut self.dqr,
            &mut self.encoder,
            &mut self.policy_warmup,
            &mut self.policy,
            &mut self.metrics,
        ] {
            fix(p);
        }
        if let Some(p) = self.encoder_base.as_mut() {
            fix(p);
        }
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1]", self.p));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta = {} is negative", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {}", self.tau));
        }
        if self.d_feat < crate::encoder::MIN_FEATURE_DIM || self.d_emb == 0 {
            return bad(format!("d_feat = {}, d_emb = {}", self.d_feat, self.d_emb));
        }
        if self.h == 0 || self.k == 0 {
            return bad("H and k must be at least 1".into());
        }
        if self.templates.is_empty() {
            return bad("templates must not be empty".into());
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_none() {
            return bad("remote backend requires an endpoint".into());
        }
        Ok(())
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.timestamp.unwrap_or_else(Utc::now)
    }
}
