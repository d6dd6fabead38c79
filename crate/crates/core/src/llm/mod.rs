//! Boundary to the language model: entity extraction, description
//! generation, ambiguity resolution and rewrite candidates, over a mock or a
//! remote chat-completions backend with an optional response cache.

mod cache;
mod mock;
mod prompt;
mod remote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use mock::{MockBackend, MOCK_MODEL};
pub use prompt::{ChatMessage, PromptTemplate, TemplateName};
pub use remote::{RemoteBackend, TOKEN_ENV};

use crate::kb::{EntityMatch, EntitySense};
use crate::rewriter::{ActionSpace, RewriteCandidate, SenseOption, Template};
use crate::text;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed LLM response: {0}")]
    MalformedResponse(String),
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub template: TemplateName,
    pub bindings: BTreeMap<String, String>,
    pub temperature: f64,
    pub seed: u64,
}

impl LlmRequest {
    pub fn new(template: TemplateName, bindings: &[(&str, String)], temperature: f64, seed: u64) -> Self {
        Self {
            template,
            bindings: bindings.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            temperature,
            seed,
        }
    }

    /// Checks the temperature and that every placeholder is bound.
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        for p in PromptTemplate::builtin(self.template).placeholders() {
            if !self.bindings.contains_key(&p) {
                return Err(LlmError::MissingBinding(p));
            }
        }
        Ok(())
    }

    pub fn binding(&self, name: &str) -> Result<&str, LlmError> {
        self.bindings
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| LlmError::MissingBinding(name.to_string()))
    }

    fn count(&self, name: &str) -> Result<usize, LlmError> {
        self.binding(name)?
            .trim()
            .parse()
            .map_err(|_| LlmError::InvalidRequest(format!("{name} is not a count")))
    }
}

pub trait LlmBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn model_name(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

/// Slot payload of the rewrite prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct PromptSlot {
    pub matched: EntityMatch,
    pub senses: Vec<SenseOption>,
}

/// Mixes strings and a seed into one reproducible 64-bit seed.
pub(crate) fn stable_seed(parts: &[&str], seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Non-empty response lines with bullets and list numbering removed.
pub fn parse_list(response: &str) -> Vec<String> {
    response
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty())
        .filter(|l| {
            let lower = l.to_lowercase();
            lower != "(none)" && lower != "none"
        })
        .map(str::to_string)
        .collect()
}

fn strip_marker(line: &str) -> &str {
    let l = line.trim();
    let l = l.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = l.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = l[digits..].strip_prefix(['.', ')']) {
            return rest.trim();
        }
    }
    l.trim_end()
}

/// LLM operations over one backend, optionally behind a response cache.
pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    cache: Option<ResponseCache>,
    temperature: f64,
    seed: u64,
}

impl Gateway {
    pub fn new(backend: Box<dyn LlmBackend>, seed: u64) -> Self {
        Self {
            backend,
            cache: None,
            temperature: 0.0,
            seed,
        }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Box::new(MockBackend::default()), seed)
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn backend(&self) -> &dyn LlmBackend {
        self.backend.as_ref()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        match &self.cache {
            Some(c) => c.cached(self.backend.as_ref(), request),
            None => self.backend.complete(request),
        }
    }

    fn ask(&self, template: TemplateName, bindings: &[(&str, String)], seed: u64) -> Result<String, LlmError> {
        self.complete(&LlmRequest::new(template, bindings, self.temperature, seed))
    }

    /// Lowercase, deduplicated visual entities mentioned in `caption`.
    pub fn extract_visual_entities(&self, caption: &str) -> Result<Vec<String>, LlmError> {
        if caption.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty caption".into()));
        }
        let resp = self.ask(TemplateName::ExtractEntities, &[("caption", caption.to_string())], self.seed)?;
        let mut out: Vec<String> = Vec::new();
        for line in parse_list(&resp) {
            let e = text::normalize_phrase(&line);
            if !e.is_empty() && !out.contains(&e) {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Exactly `h` distinct visual descriptions of `sense`.
    pub fn generate_descriptions(&self, sense: &EntitySense, h: usize) -> Result<Vec<String>, LlmError> {
        if h == 0 {
            return Err(LlmError::InvalidRequest("h must be at least 1".into()));
        }
        let resp = self.ask(
            TemplateName::DescribeEntity,
            &[("entity", sense.display_name()), ("h", h.to_string())],
            self.seed,
        )?;
        let descs = parse_list(&resp);
        if descs.len() != h {
            return Err(LlmError::MalformedResponse(format!(
                "expected {h} descriptions, got {}",
                descs.len()
            )));
        }
        for (i, d) in descs.iter().enumerate() {
            if descs[..i].contains(d) {
                return Err(LlmError::MalformedResponse(format!("duplicate description {d:?}")));
            }
        }
        Ok(descs)
    }

    /// `(sense_tag, gloss)` for every meaning of an ambiguous entity; empty
    /// when the entity is judged unambiguous.
    pub fn resolve_ambiguity(&self, entity: &str) -> Result<Vec<(String, String)>, LlmError> {
        let resp = self.ask(TemplateName::IdentifyAmbiguous, &[("entity", entity.to_string())], self.seed)?;
        let answer = parse_list(&resp).into_iter().next().unwrap_or_default().to_lowercase();
        let answer = answer.strip_prefix("answer:").unwrap_or(&answer).trim();
        if answer.starts_with("no") {
            return Ok(Vec::new());
        }
        if !answer.starts_with("yes") {
            return Err(LlmError::MalformedResponse(format!("ambiguity answer {answer:?}")));
        }
        let resp = self.ask(TemplateName::ExplainSenses, &[("entity", entity.to_string())], self.seed)?;
        let mut senses: Vec<(String, String)> = Vec::new();
        for line in parse_list(&resp) {
            let (tag, gloss) = line
                .split_once(':')
                .ok_or_else(|| LlmError::MalformedResponse(format!("sense line {line:?}")))?;
            let tag = tag.trim().to_lowercase();
            if tag.is_empty() {
                return Err(LlmError::MalformedResponse(format!("sense line {line:?}")));
            }
            if !senses.iter().any(|(t, _)| *t == tag) {
                senses.push((tag, gloss.trim().to_string()));
            }
        }
        if senses.len() < 2 {
            return Err(LlmError::MalformedResponse(format!(
                "{} sense(s) for an ambiguous entity",
                senses.len()
            )));
        }
        Ok(senses)
    }

    /// `k` rewrite candidates for the query behind `space`, each with its
    /// action sequence recovered from the returned text.
    pub fn generate_rewrite_candidates(
        &self,
        space: &ActionSpace,
        templates: &[Template],
        k: usize,
        seed: u64,
    ) -> Result<Vec<RewriteCandidate>, LlmError> {
        if k == 0 {
            return Err(LlmError::InvalidRequest("k must be at least 1".into()));
        }
        if space.slots.is_empty() {
            let identity = space.candidate(Vec::new()).expect("empty action list is legal");
            return Ok(vec![identity; k]);
        }
        let slots: Vec<PromptSlot> = space
            .slots
            .iter()
            .map(|s| PromptSlot {
                matched: s.matched.clone(),
                senses: s.senses.clone(),
            })
            .collect();
        let templates = templates.iter().map(|t| t.name()).collect::<Vec<_>>().join(",");
        let resp = self.ask(
            TemplateName::RewriteQuery,
            &[
                ("query", space.query.clone()),
                ("slots", serde_json::to_string(&slots).expect("slots serialize")),
                ("templates", templates),
                ("k", k.to_string()),
            ],
            seed,
        )?;
        let mut out = Vec::with_capacity(k);
        for line in parse_list(&resp) {
            if let Some(actions) = space.infer_actions(&line) {
                out.push(space.candidate(actions).expect("inferred actions are legal"));
                if out.len() == k {
                    break;
                }
            }
        }
        if out.len() < k {
            return Err(LlmError::MalformedResponse(format!(
                "{} of {k} rewrites fit the action space",
                out.len()
            )));
        }
        Ok(out)
    }
}
