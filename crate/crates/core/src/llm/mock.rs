//! Offline backend answering every template from the bundled lexicon.
//! Responses are pure functions of the request.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prompt::TemplateName;
use super::{stable_seed, BackendKind, LlmBackend, LlmError, LlmRequest, PromptSlot};
use crate::rewriter::{ActionSpace, RewriteAction, Slot, Template};
use crate::synthetic::{self, Attr, NON_VISUAL_FILLERS};
use crate::text;

pub const MOCK_MODEL: &str = "mock-evd-1";

/// Visual remarks that fit almost any object.
const GENERIC_VISUAL: &[&str] = &[
    "has a typical shape",
    "has a common color",
    "has ordinary parts",
    "has a familiar outline",
    "is easy to recognize",
];

#[derive(Debug, Clone)]
pub struct MockBackend {
    visual_nouns: Vec<Vec<String>>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::with_lexicon(synthetic::visual_nouns())
    }
}

impl MockBackend {
    pub fn with_lexicon<S: AsRef<str>>(nouns: impl IntoIterator<Item = S>) -> Self {
        let mut visual_nouns: Vec<Vec<String>> = nouns
            .into_iter()
            .map(|n| text::tokens(n.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        // Longest nouns first so "school bus" wins over "bus".
        visual_nouns.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        visual_nouns.dedup();
        Self { visual_nouns }
    }

    fn extract(&self, caption: &str) -> String {
        let words = text::tokens(caption);
        let mut found: Vec<String> = Vec::new();
        let mut i = 0;
        while i < words.len() {
            match self
                .visual_nouns
                .iter()
                .find(|n| i + n.len() <= words.len() && words[i..i + n.len()] == n[..])
            {
                Some(n) => {
                    let name = n.join(" ");
                    if !found.contains(&name) {
                        found.push(name);
                    }
                    i += n.len();
                }
                None => i += 1,
            }
        }
        if found.is_empty() {
            "(none)".into()
        } else {
            found.join("\n")
        }
    }
}

/// Resolves a description prompt's entity line to (entity, sense tag).
fn split_display(display: &str) -> (String, Option<String>) {
    for (e, t, _, _) in synthetic::AMBIGUOUS {
        if display == format!("{e} {t}") {
            return (e.to_string(), Some(t.to_string()));
        }
    }
    (display.to_string(), None)
}

fn describe(display: &str, h: usize, seed: u64) -> String {
    let (entity, tag) = split_display(display);
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[&entity, tag.as_deref().unwrap_or("")], seed));

    let (own, confusable): (Vec<Attr>, Vec<Attr>) = match &tag {
        Some(t) => {
            let own = synthetic::sense_entry(&entity, t).map(|e| e.attrs).unwrap_or_default();
            let other = synthetic::AMBIGUOUS
                .iter()
                .filter(|(e, t2, _, _)| *e == entity && t2 != t)
                .flat_map(|(_, _, _, a)| a.iter().copied())
                .collect();
            (own, other)
        }
        None => match synthetic::entity_entry(&entity) {
            Some(e) => {
                let partner = e
                    .partner
                    .and_then(synthetic::entity_entry)
                    .map(|p| p.attrs)
                    .unwrap_or_default();
                (e.attrs, partner)
            }
            None => (Vec::new(), Vec::new()),
        },
    };

    let mut faithful: Vec<String> = own.iter().map(|(w, f)| f.describe(w)).collect();
    faithful.shuffle(&mut rng);
    let mut partner: Vec<String> = confusable
        .iter()
        .map(|(w, _)| format!("is often seen with {w} nearby"))
        .collect();
    partner.shuffle(&mut rng);
    let mut generic: Vec<String> = GENERIC_VISUAL.iter().map(|s| s.to_string()).collect();
    generic.shuffle(&mut rng);
    let mut fillers: Vec<String> = NON_VISUAL_FILLERS
        .iter()
        .map(|f| format!("is usually associated with {f}"))
        .collect();
    fillers.shuffle(&mut rng);

    // Like a real model, only some descriptions single the entity out: two
    // faithful ones, then a detail borrowed from the confusable partner, a
    // generic visual remark and a non-visual association.
    let mut pool: Vec<String> = Vec::new();
    let split = |v: &mut Vec<String>, n: usize| -> Vec<String> { v.drain(..n.min(v.len())).collect() };
    pool.extend(split(&mut faithful, 2));
    pool.extend(split(&mut partner, 1));
    pool.extend(split(&mut generic, 1));
    pool.extend(split(&mut fillers, 1));
    pool.extend(faithful);
    pool.extend(partner);
    pool.extend(generic);
    pool.extend(fillers);
    let mut extra = 1;
    while pool.len() < h {
        pool.push(format!("has visual detail number {extra}"));
        extra += 1;
    }
    let mut chosen: Vec<String> = pool.into_iter().take(h).collect();
    chosen.shuffle(&mut rng);
    chosen
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{}. {d}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn identify(entity: &str) -> &'static str {
    if synthetic::senses_of(entity).len() >= 2 {
        "yes"
    } else {
        "no"
    }
}

fn explain(entity: &str) -> String {
    synthetic::senses_of(entity)
        .iter()
        .map(|(t, g)| format!("{t}: {g}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Samples up to `k` distinct action sequences uniformly per slot and
/// renders them; repeats earlier draws when the space is smaller than `k`.
fn rewrite(query: &str, slots_json: &str, templates: &str, k: usize, seed: u64) -> Result<String, LlmError> {
    let slots: Vec<PromptSlot> = serde_json::from_str(slots_json)
        .map_err(|e| LlmError::InvalidRequest(format!("slots binding: {e}")))?;
    let templates: Vec<Template> = templates
        .split(',')
        .filter_map(|t| Template::parse(t.trim()))
        .collect();
    let space = ActionSpace {
        query: query.to_string(),
        slots: slots
            .into_iter()
            .map(|s| Slot::new(query, s.matched, s.senses, &templates))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[query], seed));
    let mut drawn: Vec<Vec<RewriteAction>> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while drawn.len() < k && attempts < 50 * k {
        attempts += 1;
        let actions: Vec<RewriteAction> = space
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| RewriteAction {
                slot: i,
                choice: s.choices.choose(&mut rng).expect("skip is always legal").clone(),
            })
            .collect();
        let key: Vec<usize> = space.choice_indices(&actions).expect("sampled legally");
        if seen.insert(key) {
            drawn.push(actions);
        }
        if space.slots.is_empty() {
            break;
        }
    }
    let mut lines = Vec::with_capacity(k);
    for i in 0..k {
        let actions = &drawn[i % drawn.len()];
        lines.push(space.render(actions).expect("sampled legally"));
    }
    Ok(lines.join("\n"))
}

impl LlmBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn model_name(&self) -> &str {
        MOCK_MODEL
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        request.validate()?;
        match request.template {
            TemplateName::ExtractEntities => Ok(self.extract(request.binding("caption")?)),
            TemplateName::DescribeEntity => {
                let h = request.count("h")?;
                Ok(describe(request.binding("entity")?, h, request.seed))
            }
            TemplateName::IdentifyAmbiguous => Ok(identify(request.binding("entity")?).into()),
            TemplateName::ExplainSenses => Ok(explain(request.binding("entity")?)),
            TemplateName::RewriteQuery => rewrite(
                request.binding("query")?,
                request.binding("slots")?,
                request.binding("templates")?,
                request.count("k")?,
                request.seed,
            ),
        }
    }
}
