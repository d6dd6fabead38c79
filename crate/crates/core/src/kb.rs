//! Entity visual description (EVD) knowledge base.
//!
//! The knowledge base maps entity senses to short visual descriptions. It is a
//! plain value: every editing operation returns a new snapshot with a bumped
//! version and leaves the receiver untouched, so readers holding an older
//! snapshot never observe a partial update.
//!
//! On disk it is a line-delimited JSON file: a header record followed by one
//! record per entry, sorted by `(entity, sense_tag)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

/// Default cap on descriptions per entry.
pub const DEFAULT_H_MAX: usize = 5;

const FORMAT: &str = "evd-kb";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate key ({entity:?}, {sense_tag:?})")]
    DuplicateKey {
        entity: String,
        sense_tag: Option<String>,
    },
    #[error("entity {0:?} has both tagged and untagged senses")]
    MixedSenses(String),
    #[error("descriptions must not be empty")]
    EmptyDescriptions,
    #[error("{got} descriptions exceed the limit of {max}")]
    TooManyDescriptions { got: usize, max: usize },
    #[error("duplicate description {0:?}")]
    DuplicateDescription(String),
    #[error("entity must not be empty")]
    EmptyEntity,
    #[error("sense tag must not be empty")]
    EmptySenseTag,
    #[error("sense {sense_tag:?} already exists for {entity:?}")]
    DuplicateSense { entity: String, sense_tag: String },
    #[error("entity {0:?} has an untagged entry; a default tag is required to retag it")]
    MissingDefaultTag(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Where an entry's descriptions came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Manual,
}

/// One meaning of an entity. `sense_tag` is `None` for unambiguous entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySense {
    pub entity: String,
    pub sense_tag: Option<String>,
    pub source: Source,
}

impl EntitySense {
    pub fn new(entity: &str, sense_tag: Option<&str>, source: Source) -> Self {
        Self {
            entity: text::normalize_phrase(entity),
            sense_tag: sense_tag.map(|t| t.trim().to_lowercase()),
            source,
        }
    }

    pub fn key(&self) -> SenseKey {
        (self.entity.clone(), self.sense_tag.clone())
    }

    /// Entity name with its sense tag appended, as used in description prompts.
    pub fn display_name(&self) -> String {
        match &self.sense_tag {
            Some(tag) => format!("{} {}", self.entity, tag),
            None => self.entity.clone(),
        }
    }
}

pub type SenseKey = (String, Option<String>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvdEntry {
    pub sense: EntitySense,
    pub descriptions: Vec<String>,
    pub created_at: DateTime<Utc>,
}

/// A matched entity occurrence in a query; `start..end` is a byte span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvdKnowledgeBase {
    entries: BTreeMap<SenseKey, EvdEntry>,
    version: u64,
    h_max: usize,
}

impl Default for EvdKnowledgeBase {
    fn default() -> Self {
        Self::new(DEFAULT_H_MAX)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    kb_version: u64,
}

#[derive(Serialize, Deserialize)]
struct Record {
    entity: String,
    sense_tag: Option<String>,
    descriptions: Vec<String>,
    source: Source,
    created_at: DateTime<Utc>,
}

fn validate_descriptions(descriptions: &[String], h_max: usize) -> Result<(), KbError> {
    if descriptions.is_empty() {
        return Err(KbError::EmptyDescriptions);
    }
    if descriptions.len() > h_max {
        return Err(KbError::TooManyDescriptions {
            got: descriptions.len(),
            max: h_max,
        });
    }
    let mut seen = BTreeSet::new();
    for d in descriptions {
        if d.trim().is_empty() {
            return Err(KbError::EmptyDescriptions);
        }
        if !seen.insert(d.as_str()) {
            return Err(KbError::DuplicateDescription(d.clone()));
        }
    }
    Ok(())
}

impl EvdKnowledgeBase {
    pub fn new(h_max: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            version: 0,
            h_max: h_max.max(1),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn h_max(&self) -> usize {
        self.h_max
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = &EvdEntry> {
        self.entries.values()
    }

    /// Distinct entity names in sorted order.
    pub fn entity_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.entries.keys().map(|(e, _)| e.as_str()).collect();
        names.dedup();
        names
    }

    /// With a tag, at most one entry; without, every sense of the entity.
    pub fn lookup(&self, entity: &str, sense_tag: Option<&str>) -> Vec<&EvdEntry> {
        let entity = text::normalize_phrase(entity);
        match sense_tag {
            Some(tag) => self
                .entries
                .get(&(entity, Some(tag.trim().to_lowercase())))
                .into_iter()
                .collect(),
            None => self
                .entries
                .range((entity.clone(), None)..)
                .take_while(|((e, _), _)| *e == entity)
                .map(|(_, v)| v)
                .collect(),
        }
    }

    /// Inserts an entry built from already-validated parts. Used by the
    /// offline builder; rejects duplicates and mixed tagging.
    pub fn insert(&self, entry: EvdEntry) -> Result<Self, KbError> {
        let mut next = self.clone();
        next.insert_in_place(entry)?;
        next.version += 1;
        Ok(next)
    }

    fn insert_in_place(&mut self, entry: EvdEntry) -> Result<(), KbError> {
        if entry.sense.entity.is_empty() {
            return Err(KbError::EmptyEntity);
        }
        validate_descriptions(&entry.descriptions, self.h_max)?;
        let key = entry.sense.key();
        if self.entries.contains_key(&key) {
            return Err(KbError::DuplicateKey {
                entity: key.0,
                sense_tag: key.1,
            });
        }
        let existing = self.lookup(&key.0, None);
        if existing
            .iter()
            .any(|e| e.sense.sense_tag.is_some() != key.1.is_some())
        {
            return Err(KbError::MixedSenses(key.0));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// Upserts an entry with `source = manual`.
    pub fn inject_knowledge(
        &self,
        sense: &EntitySense,
        descriptions: &[String],
        now: DateTime<Utc>,
    ) -> Result<Self, KbError> {
        let sense = EntitySense {
            source: Source::Manual,
            ..EntitySense::new(&sense.entity, sense.sense_tag.as_deref(), Source::Manual)
        };
        if sense.entity.is_empty() {
            return Err(KbError::EmptyEntity);
        }
        validate_descriptions(descriptions, self.h_max)?;
        let mut next = self.clone();
        let key = sense.key();
        if next
            .lookup(&key.0, None)
            .iter()
            .any(|e| e.sense.sense_tag.is_some() != key.1.is_some())
        {
            return Err(KbError::MixedSenses(key.0));
        }
        next.entries.insert(
            key,
            EvdEntry {
                sense,
                descriptions: descriptions.to_vec(),
                created_at: now,
            },
        );
        next.version += 1;
        Ok(next)
    }

    /// Adds a new tagged sense next to the existing ones.
    ///
    /// If the entity currently has an untagged entry it is first retagged to
    /// `retag_untagged_as`, so tagged and untagged senses never coexist.
    pub fn add_parallel_sense(
        &self,
        entity: &str,
        sense_tag: &str,
        descriptions: &[String],
        retag_untagged_as: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Self, KbError> {
        let sense = EntitySense::new(entity, Some(sense_tag), Source::Manual);
        let tag = sense.sense_tag.clone().unwrap_or_default();
        if sense.entity.is_empty() {
            return Err(KbError::EmptyEntity);
        }
        if tag.is_empty() {
            return Err(KbError::EmptySenseTag);
        }
        validate_descriptions(descriptions, self.h_max)?;
        if !self.lookup(&sense.entity, Some(&tag)).is_empty() {
            return Err(KbError::DuplicateSense {
                entity: sense.entity,
                sense_tag: tag,
            });
        }

        let mut next = self.clone();
        let untagged_key = (sense.entity.clone(), None);
        if let Some(mut old) = next.entries.remove(&untagged_key) {
            let default_tag = retag_untagged_as
                .map(|t| t.trim().to_lowercase())
                .filter(|t| !t.is_empty())
                .ok_or_else(|| KbError::MissingDefaultTag(sense.entity.clone()))?;
            if default_tag == tag {
                return Err(KbError::DuplicateSense {
                    entity: sense.entity,
                    sense_tag: tag,
                });
            }
            old.sense.sense_tag = Some(default_tag);
            next.entries.insert(old.sense.key(), old);
        }
        next.entries.insert(
            sense.key(),
            EvdEntry {
                sense,
                descriptions: descriptions.to_vec(),
                created_at: now,
            },
        );
        next.version += 1;
        Ok(next)
    }

    /// Longest-match, left-to-right, case-insensitive whole-word linking of
    /// KB entity names in `query`. Matches never overlap.
    pub fn link_entities(&self, query: &str) -> Vec<EntityMatch> {
        let words = text::words(query);
        let mut by_first: BTreeMap<&str, Vec<(Vec<String>, &str)>> = BTreeMap::new();
        for name in self.entity_names() {
            let toks = text::tokens(name);
            if toks.is_empty() {
                continue;
            }
            let first = name.split(' ').next().unwrap_or(name);
            by_first.entry(first).or_default().push((toks, name));
        }
        for v in by_first.values_mut() {
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(b.1)));
        }

        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = by_first.get(words[i].text.as_str()).and_then(|cands| {
                cands.iter().find(|(toks, _)| {
                    i + toks.len() <= words.len()
                        && toks.iter().zip(&words[i..]).all(|(t, w)| *t == w.text)
                })
            });
            match hit {
                Some((toks, name)) => {
                    let last = &words[i + toks.len() - 1];
                    out.push(EntityMatch {
                        entity: name.to_string(),
                        start: words[i].start,
                        end: last.end,
                    });
                    i += toks.len();
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        Self::load_with_h_max(path, DEFAULT_H_MAX)
    }

    pub fn load_with_h_max(path: &Path, h_max: usize) -> Result<Self, KbError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let malformed = |line_no: usize, reason: String| KbError::MalformedRecord { line_no, reason };

        let header: Header = match lines.next() {
            None => return Ok(Self::new(h_max)),
            Some((_, line)) => {
                let line = line?;
                serde_json::from_str(&line).map_err(|e| malformed(1, e.to_string()))?
            }
        };
        if header.format != FORMAT || header.schema_version != SCHEMA_VERSION {
            return Err(malformed(
                1,
                format!(
                    "unsupported header {}/{}",
                    header.format, header.schema_version
                ),
            ));
        }

        let mut kb = Self::new(h_max);
        for (idx, line) in lines {
            let line = line?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
            let sense = EntitySense::new(&rec.entity, rec.sense_tag.as_deref(), rec.source);
            let entry = EvdEntry {
                sense,
                descriptions: rec.descriptions,
                created_at: rec.created_at,
            };
            match kb.insert_in_place(entry) {
                Ok(()) => {}
                Err(e @ (KbError::DuplicateKey { .. } | KbError::MixedSenses(_))) => return Err(e),
                Err(e) => return Err(malformed(line_no, e.to_string())),
            }
        }
        kb.version = header.kb_version;
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = Header {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            kb_version: self.version,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for e in self.entries.values() {
            let rec = Record {
                entity: e.sense.entity.clone(),
                sense_tag: e.sense.sense_tag.clone(),
                descriptions: e.descriptions.clone(),
                source: e.sense.source,
                created_at: e.created_at,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        w.flush()?;
        Ok(())
    }
}
