//! Log-linear autoregressive rewrite policy.
//!
//! At slot `t` the policy scores every legal choice `c` with `theta . phi(x,
//! t, c, a_{t-1})` and normalizes with a softmax over that slot's choices.
//! The log-probability of a full action sequence is the sum over slots.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::space::{ActionSpace, Choice, RewriteAction, RewriteCandidate, Template};
use super::RewriteError;
use crate::encoder::{featurize_tokens, SparseVec};
use crate::kb::DEFAULT_H_MAX;
use crate::text;

pub const DEFAULT_FEATURE_DIM: usize = 1 << 14;

const FORMAT: &str = "evdrank-rewriter";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RewritePolicy {
    pub theta: Vec<f64>,
    pub feature_seed: u64,
    pub h: usize,
    pub templates: Vec<Template>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    feature_dim: usize,
    feature_seed: u64,
    #[serde(rename = "H")]
    h: usize,
    templates: Vec<Template>,
}

/// Feature vectors of every legal choice at each slot of one fixed action
/// sequence, plus the index of the chosen action. Scoring a prepared
/// sequence is a sparse dot product per choice.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    slots: Vec<PreparedSlot>,
}

#[derive(Debug, Clone)]
struct PreparedSlot {
    choices: Vec<SparseVec>,
    chosen: usize,
}

impl PreparedSequence {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

fn prev_kind(prev: Option<&Choice>) -> &'static str {
    match prev {
        None => "start",
        Some(Choice::Skip) => "skip",
        Some(Choice::Insert { template, .. }) => template.name(),
    }
}

fn dot(theta: &[f64], f: &SparseVec) -> f64 {
    f.iter().map(|&(k, v)| theta[k] * v).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl RewritePolicy {
    pub fn new(feature_dim: usize, feature_seed: u64, h: usize, templates: Vec<Template>) -> Self {
        Self {
            theta: vec![0.0; feature_dim.max(16)],
            feature_seed,
            h,
            templates,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len()
    }

    /// Hashed indicator features for choosing `choice` at `slot`.
    ///
    /// Query words are crossed with the template and with description words;
    /// description words also appear alone and crossed with the entity.
    pub fn features(
        &self,
        space: &ActionSpace,
        slot: usize,
        choice: &Choice,
        prev: Option<&Choice>,
    ) -> SparseVec {
        let s = &space.slots[slot];
        let prev = prev_kind(prev);
        let mut keys = Vec::new();
        match choice {
            Choice::Skip => {
                keys.push("bias:skip".to_string());
                keys.push(format!("skip|prev:{prev}"));
                keys.push(format!("skip|ent:{}", s.matched.entity));
            }
            Choice::Insert {
                desc_index,
                template,
                sense_tag,
            } => {
                let t = template.name();
                keys.push("bias:insert".to_string());
                keys.push(format!("tmpl:{t}"));
                keys.push(format!("didx:{desc_index}"));
                keys.push(format!("prev:{prev}|tmpl:{t}"));
                keys.push(format!("tagged:{}", sense_tag.is_some()));
                let desc = s.description(choice).unwrap_or_default();
                let dtoks = text::tokens(desc);
                let qtoks = text::tokens(&space.query);
                for d in &dtoks {
                    keys.push(format!("dtok:{d}"));
                    keys.push(format!("ent:{}|dtok:{d}", s.matched.entity));
                    for q in &qtoks {
                        keys.push(format!("q:{q}|dtok:{d}"));
                    }
                }
                for q in &qtoks {
                    keys.push(format!("q:{q}|tmpl:{t}"));
                }
            }
        }
        featurize_tokens(&keys, self.feature_dim(), self.feature_seed)
    }

    fn slot_features(&self, space: &ActionSpace, slot: usize, prev: Option<&Choice>) -> Vec<SparseVec> {
        space.slots[slot]
            .choices
            .iter()
            .map(|c| self.features(space, slot, c, prev))
            .collect()
    }

    /// Precomputes features for scoring `actions` repeatedly under changing
    /// weights.
    pub fn prepare(
        &self,
        space: &ActionSpace,
        actions: &[RewriteAction],
    ) -> Result<PreparedSequence, RewriteError> {
        let idx = space.choice_indices(actions)?;
        let slots = idx
            .iter()
            .enumerate()
            .map(|(t, &chosen)| PreparedSlot {
                choices: self.slot_features(space, t, t.checked_sub(1).map(|p| &actions[p].choice)),
                chosen,
            })
            .collect();
        Ok(PreparedSequence { slots })
    }

    /// Log-probability of a prepared sequence; adds its gradient, scaled by
    /// `grad_scale`, into `grad`.
    pub fn logprob_prepared(&self, seq: &PreparedSequence, grad: Option<(&mut [f64], f64)>) -> f64 {
        let mut lp = 0.0;
        let mut grad = grad;
        for slot in &seq.slots {
            let logits: Vec<f64> = slot.choices.iter().map(|f| dot(&self.theta, f)).collect();
            let probs = softmax(&logits);
            lp += probs[slot.chosen].ln();
            if let Some((g, scale)) = grad.as_mut() {
                for &(k, v) in slot.choices[slot.chosen].iter() {
                    g[k] += *scale * v;
                }
                for (f, p) in slot.choices.iter().zip(&probs) {
                    for &(k, v) in f.iter() {
                        g[k] -= *scale * p * v;
                    }
                }
            }
        }
        lp
    }

    /// Log-probability of `actions` and its gradient with respect to theta.
    pub fn logprob(
        &self,
        space: &ActionSpace,
        actions: &[RewriteAction],
    ) -> Result<(f64, Vec<f64>), RewriteError> {
        let seq = self.prepare(space, actions)?;
        let mut g = vec![0.0; self.feature_dim()];
        let lp = self.logprob_prepared(&seq, Some((&mut g, 1.0)));
        Ok((lp, g))
    }

    /// Choice probabilities at `slot` given the previous choice.
    pub fn slot_probabilities(&self, space: &ActionSpace, slot: usize, prev: Option<&Choice>) -> Vec<f64> {
        let logits: Vec<f64> = self
            .slot_features(space, slot, prev)
            .iter()
            .map(|f| dot(&self.theta, f))
            .collect();
        softmax(&logits)
    }

    /// Per-slot argmax; ties go to the smallest choice index.
    pub fn decode_greedy(&self, space: &ActionSpace) -> RewriteCandidate {
        let mut actions: Vec<RewriteAction> = Vec::with_capacity(space.slots.len());
        let mut lp = 0.0;
        for t in 0..space.slots.len() {
            let probs = self.slot_probabilities(space, t, actions.last().map(|a| &a.choice));
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            lp += probs[best].ln();
            actions.push(RewriteAction {
                slot: t,
                choice: space.slots[t].choices[best].clone(),
            });
        }
        let mut c = space.candidate(actions).expect("decoded actions are legal");
        c.logprob = Some(lp);
        c
    }

    /// Per-slot categorical draw from the tempered distribution. A
    /// temperature of zero falls back to greedy decoding.
    pub fn decode_sample(&self, space: &ActionSpace, seed: u64, temperature: f64) -> RewriteCandidate {
        if temperature <= 0.0 {
            return self.decode_greedy(space);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actions: Vec<RewriteAction> = Vec::with_capacity(space.slots.len());
        let mut lp = 0.0;
        for t in 0..space.slots.len() {
            let feats = self.slot_features(space, t, actions.last().map(|a| &a.choice));
            let logits: Vec<f64> = feats.iter().map(|f| dot(&self.theta, f)).collect();
            let tempered: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs = softmax(&tempered);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            lp += softmax(&logits)[pick].ln();
            actions.push(RewriteAction {
                slot: t,
                choice: space.slots[t].choices[pick].clone(),
            });
        }
        let mut c = space.candidate(actions).expect("sampled actions are legal");
        c.logprob = Some(lp);
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), RewriteError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let header = Header {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            feature_dim: self.feature_dim(),
            feature_seed: self.feature_seed,
            h: self.h,
            templates: self.templates.clone(),
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        for v in &self.theta {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewriteError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| RewriteError::Checkpoint(e.to_string()))?;
        if header.format != FORMAT || header.schema_version != SCHEMA_VERSION {
            return Err(RewriteError::Checkpoint(format!(
                "unsupported checkpoint {}/{}",
                header.format, header.schema_version
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * header.feature_dim {
            return Err(RewriteError::Checkpoint(format!(
                "expected {} weight bytes, found {}",
                8 * header.feature_dim,
                bytes.len()
            )));
        }
        let theta: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(RewriteError::Checkpoint("non-finite weight".into()));
        }
        Ok(Self {
            theta,
            feature_seed: header.feature_seed,
            h: header.h,
            templates: header.templates,
        })
    }
}

impl Default for RewritePolicy {
    fn default() -> Self {
        Self::new(DEFAULT_FEATURE_DIM, 0, DEFAULT_H_MAX, Template::ALL.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{EntitySense, EvdEntry, EvdKnowledgeBase, Source};
    use crate::rewriter::space::action_space;
    use chrono::{TimeZone, Utc};

    fn kb() -> EvdKnowledgeBase {
        let mut kb = EvdKnowledgeBase::default();
        for e in ["tent", "village"] {
            kb = kb
                .insert(EvdEntry {
                    sense: EntitySense::new(e, None, Source::Llm),
                    descriptions: (0..5).map(|i| format!("has {e} trait {i}")).collect(),
                    created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
                })
                .unwrap();
        }
        kb
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = RewritePolicy::new(256, 1, 5, Template::ALL.to_vec());
        let s = action_space("a tent by a village", &kb(), &p.templates);
        let c = &s.slots[0].choices;
        let acts = vec![
            RewriteAction { slot: 0, choice: c[4].clone() },
            RewriteAction::skip(1),
        ];
        let (lp, _) = p.logprob(&s, &acts).unwrap();
        assert!((lp + 2.0 * 16f64.ln()).abs() < 1e-12);

        let probs = p.slot_probabilities(&s, 0, None);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_query_has_zero_logprob() {
        let p = RewritePolicy::new(64, 1, 5, Template::ALL.to_vec());
        let s = action_space("nothing to see", &kb(), &p.templates);
        assert_eq!(p.logprob(&s, &[]).unwrap().0, 0.0);
        let g = p.decode_greedy(&s);
        assert_eq!(g.text, "nothing to see");
        assert!(g.actions.is_empty());
    }

    #[test]
    fn greedy_with_zero_weights_picks_first_choice() {
        let p = RewritePolicy::new(64, 1, 5, Template::ALL.to_vec());
        let s = action_space("a tent by a village", &kb(), &p.templates);
        let g = p.decode_greedy(&s);
        assert!(g.actions.iter().all(|a| a.choice == Choice::Skip));
        assert_eq!(g.text, s.query);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut p = RewritePolicy::new(512, 3, 5, Template::ALL.to_vec());
        for (i, t) in p.theta.iter_mut().enumerate() {
            *t = ((i * 37) % 11) as f64 / 10.0 - 0.5;
        }
        let s = action_space("a tent by a village", &kb(), &p.templates);
        assert_eq!(p.decode_sample(&s, 9, 1.0), p.decode_sample(&s, 9, 1.0));
        let distinct: std::collections::BTreeSet<String> =
            (0..40).map(|seed| p.decode_sample(&s, seed, 1.0).text).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn illegal_actions_are_rejected() {
        let p = RewritePolicy::new(64, 1, 5, Template::ALL.to_vec());
        let s = action_space("a tent", &kb(), &p.templates);
        let bad = RewriteAction {
            slot: 0,
            choice: Choice::Insert {
                desc_index: 9,
                template: Template::Relative,
                sense_tag: None,
            },
        };
        assert!(matches!(p.logprob(&s, &[bad]), Err(RewriteError::IllegalAction(_))));
        assert!(p.logprob(&s, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        let mut p = RewritePolicy::new(64, 5, 5, vec![Template::Relative, Template::Parenthetical]);
        p.theta[3] = -1.25;
        p.save(&path).unwrap();
        assert_eq!(RewritePolicy::load(&path).unwrap(), p);
    }
}
