use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::encoder::{rank_order, recall_at_h, similarity, CorpusItem, Embedding, EncoderParams};
use crate::kb::EvdKnowledgeBase;
use crate::rewriter::{action_space, RewritePolicy, Template};
use crate::synthetic::NON_VISUAL_FILLERS;

/// Number of parallel queries in the det/des baselines, original included.
pub const PARALLEL_QUERIES: usize = 5;

/// Mean of `values`, summed in sorted order so the result does not depend
/// on the order the values were produced in.
pub fn order_free_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// A query prepared for scoring: its own embedding plus the embeddings of
/// the texts whose similarities are averaged with it.
#[derive(Debug, Clone)]
pub struct ScoredQuery {
    pub original: Embedding,
    pub rewrites: Vec<Embedding>,
    pub mode: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    /// Plain similarity of the original query.
    Plain,
    /// Equal-weight mean over the original and every rewrite.
    Parallel,
    /// Half original, half the mean over rewrite variants.
    HalfAndHalf,
}

impl ScoredQuery {
    pub fn score(&self, item: &Embedding) -> f64 {
        let s = similarity(&self.original, item);
        match self.mode {
            Averaging::Plain => s,
            Averaging::Parallel => {
                let mut v = vec![s];
                v.extend(self.rewrites.iter().map(|r| similarity(r, item)));
                order_free_mean(&v)
            }
            Averaging::HalfAndHalf => {
                let rw: Vec<f64> = self.rewrites.iter().map(|r| similarity(r, item)).collect();
                0.5 * s + 0.5 * order_free_mean(&rw)
            }
        }
    }
}

/// Greedy rewrite texts for `query`, one per parallel sense combination.
pub fn rewrite_variants(policy: &RewritePolicy, kb: &EvdKnowledgeBase, query: &str) -> Vec<String> {
    let space = action_space(query, kb, &policy.templates);
    let greedy = policy.decode_greedy(&space);
    space
        .parallel_sense_variants(&greedy.actions)
        .iter()
        .map(|a| space.render(a).expect("variants of a legal sequence are legal"))
        .collect()
}

pub fn prepare_rewriter_query(
    params: &EncoderParams,
    policy: &RewritePolicy,
    kb: &EvdKnowledgeBase,
    query: &str,
) -> ScoredQuery {
    ScoredQuery {
        original: params.encode_text(query),
        rewrites: rewrite_variants(policy, kb, query)
            .iter()
            .map(|t| params.encode_text(t))
            .collect(),
        mode: Averaging::HalfAndHalf,
    }
}

/// Score of `item` for `query`: the mean of the plain similarity and the
/// similarity of the greedy rewrite (itself averaged over parallel senses).
pub fn final_score(
    params: &EncoderParams,
    policy: &RewritePolicy,
    kb: &EvdKnowledgeBase,
    query: &str,
    item: &CorpusItem,
) -> f64 {
    prepare_rewriter_query(params, policy, kb, query).score(&params.encode_item(item))
}

/// Inserts a parenthetical after every linked entity, or appends it when
/// the query links nothing.
fn decorate(query: &str, kb: &EvdKnowledgeBase, mut pick: impl FnMut(&str) -> Option<String>) -> String {
    let matches = kb.link_entities(query);
    if matches.is_empty() {
        return match pick("") {
            Some(extra) => format!("{query} ({extra})"),
            None => query.to_string(),
        };
    }
    let mut out = String::new();
    let mut cursor = 0;
    for m in &matches {
        out.push_str(&query[cursor..m.end]);
        if let Some(extra) = pick(&m.entity) {
            out.push_str(&Template::Parenthetical.insertion(&extra));
        }
        cursor = m.end;
    }
    out.push_str(&query[cursor..]);
    out
}

/// The original query plus four variants carrying random non-visual fillers.
pub fn det_style_variants(query: &str, kb: &EvdKnowledgeBase, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut v = vec![query.to_string()];
    for _ in 1..PARALLEL_QUERIES {
        v.push(decorate(query, kb, |_| {
            NON_VISUAL_FILLERS.choose(rng).map(|s| s.to_string())
        }));
    }
    v
}

/// The original query plus four variants, each carrying a random KB
/// description (over all senses) for every linked entity.
pub fn des_style_variants(query: &str, kb: &EvdKnowledgeBase, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut v = vec![query.to_string()];
    for _ in 1..PARALLEL_QUERIES {
        v.push(decorate(query, kb, |entity| {
            if entity.is_empty() {
                return None;
            }
            let pool: Vec<&String> = kb
                .lookup(entity, None)
                .into_iter()
                .flat_map(|e| e.descriptions.iter())
                .collect();
            pool.choose(rng).map(|s| s.to_string())
        }));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub direction: String,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    pub n_queries: usize,
    #[serde(rename = "delta_R@1")]
    pub delta_r1: f64,
    #[serde(rename = "delta_R@5")]
    pub delta_r5: f64,
    #[serde(rename = "delta_R@10")]
    pub delta_r10: f64,
}

/// Score matrix `s[q][i]` of test caption `q` against test item `i` under
/// one strategy. Caption `q` belongs to item `q`.
pub fn score_matrix(
    strategy: Strategy,
    params: &EncoderParams,
    policy: &RewritePolicy,
    kb: &EvdKnowledgeBase,
    corpus: &[CorpusItem],
    seed: u64,
) -> Vec<Vec<f64>> {
    let items: Vec<Embedding> = corpus.iter().map(|it| params.encode_item(it)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|it| {
            let q = &it.caption;
            let parallel = |texts: Vec<String>| ScoredQuery {
                original: params.encode_text(q),
                rewrites: texts[1..].iter().map(|t| params.encode_text(t)).collect(),
                mode: Averaging::Parallel,
            };
            let sq = match strategy {
                Strategy::None => ScoredQuery {
                    original: params.encode_text(q),
                    rewrites: Vec::new(),
                    mode: Averaging::Plain,
                },
                Strategy::DetStyle => parallel(det_style_variants(q, kb, &mut rng)),
                Strategy::DesStyle => parallel(des_style_variants(q, kb, &mut rng)),
                Strategy::EvdRewriter => prepare_rewriter_query(params, policy, kb, q),
            };
            items.iter().map(|e| sq.score(e)).collect()
        })
        .collect()
}

/// Recall@{1,5,10} in both directions: text-to-item ranks each row,
/// item-to-text ranks each column.
pub fn recalls(scores: &[Vec<f64>], corpus: &[CorpusItem]) -> [(String, [f64; 3]); 2] {
    let ids: Vec<String> = corpus.iter().map(|c| c.id.clone()).collect();
    let n = ids.len();
    let rank = |row: Vec<f64>| -> Vec<String> {
        let mut pairs: Vec<(String, f64)> = ids.iter().cloned().zip(row).collect();
        pairs.sort_by(rank_order);
        pairs.into_iter().map(|(id, _)| id).collect()
    };
    let truth: Vec<BTreeSet<String>> = ids.iter().map(|id| BTreeSet::from([id.clone()])).collect();
    let t2i: Vec<Vec<String>> = scores.iter().map(|r| rank(r.clone())).collect();
    let i2t: Vec<Vec<String>> = (0..n).map(|i| rank((0..n).map(|q| scores[q][i]).collect())).collect();
    let at = |ranked: &[Vec<String>]| [1, 5, 10].map(|h| recall_at_h(ranked, &truth, h));
    [("T2I".to_string(), at(&t2i)), ("I2T".to_string(), at(&i2t))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_free_mean_ignores_order() {
        let a = [0.1, 0.7, -0.3, 0.2, 0.9];
        let mut b = a;
        b.reverse();
        assert_eq!(order_free_mean(&a), order_free_mean(&b));
        assert!((order_free_mean(&a) - 0.32).abs() < 1e-12);
    }

    #[test]
    fn half_and_half_matches_arithmetic() {
        let q = ScoredQuery {
            original: Embedding(vec![1.0, 0.0]),
            rewrites: vec![Embedding(vec![0.6, 0.8])],
            mode: Averaging::HalfAndHalf,
        };
        let item = Embedding(vec![0.4, (1.0f64 - 0.16).sqrt()]);
        let expect = 0.5 * 0.4 + 0.5 * (0.6 * 0.4 + 0.8 * (1.0f64 - 0.16).sqrt());
        assert!((q.score(&item) - expect).abs() < 1e-15);
    }
}
