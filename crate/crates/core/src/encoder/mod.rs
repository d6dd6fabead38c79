//! Desk-scale dual-encoder retriever: hashed features, linear projections,
//! symmetric contrastive training, exact top-k search and Recall@h.

mod featurize;
mod index;
mod loss;
mod metrics;
mod params;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use featurize::{
    featurize_attributes, featurize_text, featurize_tokens, hash_token, text_tokens, SparseVec, MIN_FEATURE_DIM,
};
pub use index::{rank_order, RetrievalIndex};
pub use loss::{
    contrastive_loss, contrastive_loss_value, contrastive_total, train_step, ContrastiveBatch,
    ContrastiveLoss, DirectionalLoss, EncoderGrads, Sgd,
};
pub use metrics::recall_at_h;
pub use params::{
    similarity, Embedding, EncoderParams, DEFAULT_D_EMB, DEFAULT_D_FEAT, DEFAULT_TAU,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("contrastive loss is not finite")]
    NonFiniteLoss,
    #[error("index was built with different encoder parameters")]
    StaleIndex,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("batch needs matching, non-zero lengths (items {items}, texts {texts})")]
    InvalidBatch { items: usize, texts: usize },
    #[error("invalid encoder parameters: {0}")]
    InvalidParams(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad corpus record at line {line_no}: {reason}")]
    Corpus { line_no: usize, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One retrievable item: its id, the caption that describes it, and the
/// symbolic visual attributes standing in for image content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub caption: String,
    pub attributes: Vec<String>,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>, EncoderError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EncoderError::Corpus { line_no, reason };
        let item: CorpusItem = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if item.attributes.is_empty() {
            return Err(bad(format!("item {} has no attributes", item.id)));
        }
        if !ids.insert(item.id.clone()) {
            return Err(bad(format!("duplicate id {}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn save_corpus(items: &[CorpusItem], path: &Path) -> Result<(), EncoderError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        writeln!(w, "{}", serde_json::to_string(it).expect("item serializes"))?;
    }
    w.flush()?;
    Ok(())
}
