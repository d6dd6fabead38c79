use std::cmp::Ordering;

use super::params::{similarity, Embedding, EncoderParams};
use super::{CorpusItem, EncoderError};

/// Immutable matrix of item embeddings, tagged with the parameter version
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    item_ids: Vec<String>,
    embeddings: Vec<Embedding>,
    params_version: String,
}

/// Descending score, then ascending id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RetrievalIndex {
    pub fn build(params: &EncoderParams, corpus: &[CorpusItem]) -> Result<Self, EncoderError> {
        if corpus.is_empty() {
            return Err(EncoderError::EmptyCorpus);
        }
        Ok(Self {
            item_ids: corpus.iter().map(|c| c.id.clone()).collect(),
            embeddings: corpus.iter().map(|c| params.encode_item(c)).collect(),
            params_version: params.version(),
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn params_version(&self) -> &str {
        &self.params_version
    }

    /// Exact top-`k` items by dot product with `query`.
    ///
    /// `params` must be the parameters the index was built with.
    pub fn top_k(
        &self,
        params: &EncoderParams,
        query: &Embedding,
        k: usize,
    ) -> Result<Vec<(String, f64)>, EncoderError> {
        if params.version() != self.params_version {
            return Err(EncoderError::StaleIndex);
        }
        Ok(self.top_k_unchecked(query, k))
    }

    /// [`top_k`](Self::top_k) without the parameter-version check, for callers
    /// that already verified it once for a batch of queries.
    pub fn top_k_unchecked(&self, query: &Embedding, k: usize) -> Vec<(String, f64)> {
        let k = k.max(1);
        let mut scored: Vec<(String, f64)> = self
            .item_ids
            .iter()
            .zip(&self.embeddings)
            .map(|(id, e)| (id.clone(), similarity(query, e)))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        scored
    }
}
