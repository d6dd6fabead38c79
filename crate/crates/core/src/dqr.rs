//! Builder for the rewriting dataset: LLM candidates scored by the
//! retriever, keeping only rewrites that beat the original query.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{similarity, CorpusItem, EncoderParams};
use crate::kb::EvdKnowledgeBase;
use crate::llm::{Gateway, LlmError};
use crate::rewriter::{action_space, RewriteCandidate, Template};

#[derive(Debug, Error)]
pub enum DqrError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One query with its improving rewrites, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqrRecord {
    pub query_id: String,
    pub x: String,
    pub original_score: f64,
    pub candidates: Vec<RewriteCandidate>,
}

impl DqrRecord {
    pub fn k_effective(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub attempted: usize,
    pub kept: usize,
    pub skipped_no_entity: usize,
    pub skipped_no_improver: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub k: usize,
    pub seed: u64,
    /// Keep only the single best improving candidate.
    pub best_only: bool,
    pub templates: Vec<Template>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            best_only: false,
            templates: Template::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordOutcome {
    Kept(DqrRecord),
    NoEntity,
    NoImprover,
}

pub fn score_candidate(params: &EncoderParams, text: &str, truth: &CorpusItem) -> f64 {
    similarity(&params.encode_text(text), &params.encode_item(truth))
}

/// Applies the selection rule to scored candidates: strict improvers only,
/// sorted by score descending (stable), first occurrence of each text kept.
pub fn select_improvers(original_score: f64, scored: Vec<RewriteCandidate>, best_only: bool) -> Vec<RewriteCandidate> {
    let mut kept: Vec<RewriteCandidate> = Vec::new();
    for c in scored {
        if kept.iter().any(|k| k.text == c.text) {
            continue;
        }
        kept.push(c);
    }
    kept.retain(|c| c.score.is_some_and(|s| s > original_score));
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    if best_only {
        kept.truncate(1);
    }
    kept
}

/// Seed for the candidate draw of one query; depends on the query id so
/// records are independent of corpus order.
fn record_seed(seed: u64, query_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in query_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn build_record(
    params: &EncoderParams,
    gateway: &Gateway,
    kb: &EvdKnowledgeBase,
    query_id: &str,
    x: &str,
    truth: &CorpusItem,
    options: &BuildOptions,
) -> Result<RecordOutcome, DqrError> {
    if options.k == 0 {
        return Err(DqrError::InvalidK);
    }
    let space = action_space(x, kb, &options.templates);
    if space.slots.is_empty() {
        return Ok(RecordOutcome::NoEntity);
    }
    let original_score = score_candidate(params, x, truth);
    let truth_emb = params.encode_item(truth);
    let candidates = gateway.generate_rewrite_candidates(
        &space,
        &options.templates,
        options.k,
        record_seed(options.seed, query_id),
    )?;
    let scored = candidates
        .into_iter()
        .map(|mut c| {
            c.score = Some(similarity(&params.encode_text(&c.text), &truth_emb));
            c.logprob = None;
            c
        })
        .collect();
    let kept = select_improvers(original_score, scored, options.best_only);
    if kept.is_empty() {
        return Ok(RecordOutcome::NoImprover);
    }
    Ok(RecordOutcome::Kept(DqrRecord {
        query_id: query_id.to_string(),
        x: x.to_string(),
        original_score,
        candidates: kept,
    }))
}

/// One attempt per corpus item, pairing its caption with the item itself.
pub fn build_dataset(
    params: &EncoderParams,
    gateway: &Gateway,
    kb: &EvdKnowledgeBase,
    corpus: &[CorpusItem],
    options: &BuildOptions,
) -> Result<(Vec<DqrRecord>, BuildReport), DqrError> {
    let mut report = BuildReport::default();
    let mut records = Vec::new();
    for item in corpus {
        report.attempted += 1;
        match build_record(params, gateway, kb, &item.id, &item.caption, item, options)? {
            RecordOutcome::Kept(r) => {
                report.kept += 1;
                records.push(r);
            }
            RecordOutcome::NoEntity => report.skipped_no_entity += 1,
            RecordOutcome::NoImprover => report.skipped_no_improver += 1,
        }
    }
    Ok((records, report))
}

pub fn save_records(path: &Path, records: &[DqrRecord]) -> Result<(), DqrError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<DqrRecord>, DqrError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DqrError::MalformedRecord {
            line_no: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub records: usize,
    pub candidates: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-checks the selection rule using nothing but the dataset file: every
/// candidate scores strictly above its record's original score and scores
/// never increase down the list.
pub fn audit_file(path: &Path) -> Result<AuditReport, DqrError> {
    let records = load_records(path)?;
    let mut report = AuditReport {
        records: records.len(),
        ..AuditReport::default()
    };
    for r in &records {
        if r.candidates.is_empty() {
            report.violations.push(format!("{}: no candidates", r.query_id));
        }
        let mut prev = f64::INFINITY;
        for (i, c) in r.candidates.iter().enumerate() {
            report.candidates += 1;
            let Some(s) = c.score else {
                report.violations.push(format!("{}[{i}]: missing score", r.query_id));
                continue;
            };
            if !(s > r.original_score) {
                report.violations.push(format!(
                    "{}[{i}]: score {s} not above original {}",
                    r.query_id, r.original_score
                ));
            }
            if s > prev {
                report.violations.push(format!("{}[{i}]: score {s} above previous {prev}", r.query_id));
            }
            prev = s;
        }
    }
    Ok(report)
}
