//! End-to-end pipeline: KB construction, dataset building, rewriter
//! training, retriever fine-tuning with random rewrites, and evaluation.

mod config;
mod eval;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::{PipelineConfig, Strategy};
pub use eval::{
    des_style_variants, det_style_variants, final_score, order_free_mean, prepare_rewriter_query, recalls,
    rewrite_variants, score_matrix, Averaging, MetricsRecord, ScoredQuery, PARALLEL_QUERIES,
};

use crate::dqr::{self, BuildOptions, BuildReport, DqrError};
use crate::encoder::{self, ContrastiveBatch, CorpusItem, EncoderError, EncoderParams, Sgd};
use crate::kb::{EntitySense, EvdEntry, EvdKnowledgeBase, KbError, Source};
use crate::llm::{BackendKind, Gateway, LlmBackend, LlmError, MockBackend, RemoteBackend, ResponseCache};
use crate::rewriter::{
    action_space, train_rewriter, Phase, RewriteError, RewritePolicy, RewriterTrainConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Dqr(#[from] DqrError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub fn gateway(config: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let backend: Box<dyn LlmBackend> = match config.backend {
        BackendKind::Mock => Box::new(MockBackend::default()),
        BackendKind::Remote => Box::new(RemoteBackend::new(
            config.endpoint.as_deref().unwrap_or_default(),
            &config.model,
        )?),
    };
    let mut g = Gateway::new(backend, config.seed);
    if let Some(dir) = &config.cache_dir {
        g = g.with_cache(ResponseCache::new(dir));
    }
    Ok(g)
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusItem>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Config(format!("corpus {} not found", path.display())));
    }
    Ok(encoder::load_corpus(path)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KbStats {
    pub captions: usize,
    pub distinct_entities: usize,
    pub kept_entities: usize,
    pub ambiguous_entities: usize,
    pub entries: usize,
}

/// Extracts entities from every caption of both corpora, keeps those seen
/// in at least `min_entity_freq` captions, resolves ambiguity and writes
/// `H` descriptions per sense.
pub fn build_kb(config: &PipelineConfig, gateway: &Gateway) -> Result<(EvdKnowledgeBase, KbStats), PipelineError> {
    let mut captions = Vec::new();
    for path in [&config.train_corpus, &config.test_corpus] {
        if path.exists() {
            captions.extend(encoder::load_corpus(path)?.into_iter().map(|c| c.caption));
        }
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for caption in captions.iter().filter(|c| !c.trim().is_empty()) {
        for e in gateway.extract_visual_entities(caption)? {
            *freq.entry(e).or_default() += 1;
        }
    }
    let mut stats = KbStats {
        captions: captions.len(),
        distinct_entities: freq.len(),
        ..KbStats::default()
    };
    let now = config.now();
    let mut kb = EvdKnowledgeBase::new(config.h.max(crate::kb::DEFAULT_H_MAX));
    for (entity, _) in freq.iter().filter(|(_, n)| **n >= config.min_entity_freq) {
        stats.kept_entities += 1;
        let senses = gateway.resolve_ambiguity(entity)?;
        if !senses.is_empty() {
            stats.ambiguous_entities += 1;
        }
        let tags: Vec<Option<&str>> = if senses.is_empty() {
            vec![None]
        } else {
            senses.iter().map(|(t, _)| Some(t.as_str())).collect()
        };
        for tag in tags {
            let sense = EntitySense::new(entity, tag, Source::Llm);
            let descriptions = gateway.generate_descriptions(&sense, config.h)?;
            kb = kb.insert(EvdEntry {
                sense,
                descriptions,
                created_at: now,
            })?;
        }
    }
    stats.entries = kb.len();
    kb.save(&config.kb)?;
    info!("knowledge base: {stats:?}");
    Ok((kb, stats))
}

/// The starting retriever: the configured base checkpoint or a fresh tied
/// initialization.
pub fn base_encoder(config: &PipelineConfig) -> Result<EncoderParams, PipelineError> {
    match &config.encoder_base {
        Some(p) => Ok(EncoderParams::load(p)?),
        None => Ok(EncoderParams::init(
            config.d_feat,
            config.d_emb,
            config.tau,
            config.hash_seed,
            config.init_seed,
        )),
    }
}

fn load_kb(config: &PipelineConfig) -> Result<EvdKnowledgeBase, PipelineError> {
    Ok(EvdKnowledgeBase::load_with_h_max(
        &config.kb,
        config.h.max(crate::kb::DEFAULT_H_MAX),
    )?)
}

pub fn build_dqr(config: &PipelineConfig, gateway: &Gateway) -> Result<BuildReport, PipelineError> {
    let kb = load_kb(config)?;
    let corpus = read_corpus(&config.train_corpus)?;
    let params = base_encoder(config)?;
    let options = BuildOptions {
        k: config.k,
        seed: config.seed,
        best_only: config.best_only,
        templates: config.templates.clone(),
    };
    let (records, report) = dqr::build_dataset(&params, gateway, &kb, &corpus, &options)?;
    dqr::save_records(&config.dqr, &records)?;
    info!("rewriting dataset: {report:?}");
    Ok(report)
}

pub fn train_rewriter_phase(config: &PipelineConfig, phase: Phase) -> Result<crate::rewriter::TrainReport, PipelineError> {
    let kb = load_kb(config)?;
    let records = dqr::load_records(&config.dqr)?;
    let (start, epochs, out) = match phase {
        Phase::Warmup => (
            RewritePolicy::new(config.rewriter_feature_dim, config.seed, config.h, config.templates.clone()),
            config.rewriter_warmup_epochs,
            &config.policy_warmup,
        ),
        Phase::Align => (
            RewritePolicy::load(&config.policy_warmup)?,
            config.rewriter_align_epochs,
            &config.policy,
        ),
    };
    let train_config = RewriterTrainConfig {
        learning_rate: config.rewriter_lr,
        epochs,
        batch_size: config.rewriter_batch,
        beta: config.beta,
        seed: config.seed,
        reward: config.reward,
    };
    let (policy, report) = train_rewriter(&start, &kb, &records, phase, &train_config)?;
    policy.save(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Contrastive fine-tuning where each training text is swapped for its
/// rewrite with probability `p`, drawn independently per example and epoch.
///
/// Batch order and rewrite draws use separate generators derived from
/// `seed`, so `p = 0` reproduces plain fine-tuning exactly.
pub fn finetune_encoder(
    params: &EncoderParams,
    corpus: &[CorpusItem],
    rewrites: Option<(&[String], f64)>,
    options: &FinetuneOptions,
) -> Result<EncoderParams, PipelineError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus.into());
    }
    if let Some((r, p)) = rewrites {
        if r.len() != corpus.len() || !(0.0..=1.0).contains(&p) {
            return Err(PipelineError::Config(format!(
                "{} rewrites for {} items at p = {p}",
                r.len(),
                corpus.len()
            )));
        }
    }
    let mut params = params.clone();
    let mut sgd = Sgd::new(options.learning_rate, options.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut rewrite_rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5157_4e4f_5245_5752);
    let size = if options.batch_size == 0 { corpus.len() } else { options.batch_size };
    for epoch in 0..options.epochs {
        let texts: Vec<&str> = corpus
            .iter()
            .enumerate()
            .map(|(i, item)| match rewrites {
                Some((r, p)) if p > 0.0 && rewrite_rng.random::<f64>() < p => r[i].as_str(),
                _ => item.caption.as_str(),
            })
            .collect();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(size) {
            let batch = ContrastiveBatch::new(
                chunk.iter().map(|&i| &corpus[i]).collect(),
                chunk.iter().map(|&i| texts[i].to_string()).collect(),
            )?;
            total += sgd.step(&mut params, &batch)?;
        }
        info!("fine-tune epoch {epoch}: mean batch loss {:.4}", total / order.chunks(size).len() as f64);
    }
    Ok(params)
}

/// Fine-tunes the base retriever with the frozen rewriter's greedy
/// rewrites applied at rate `p`.
pub fn finetune_retriever(config: &PipelineConfig) -> Result<EncoderParams, PipelineError> {
    let kb = load_kb(config)?;
    let policy = RewritePolicy::load(&config.policy)?;
    let corpus = read_corpus(&config.train_corpus)?;
    let rewrites: Vec<String> = corpus
        .iter()
        .map(|item| policy.decode_greedy(&action_space(&item.caption, &kb, &policy.templates)).text)
        .collect();
    let options = FinetuneOptions {
        learning_rate: config.encoder_lr,
        momentum: config.encoder_momentum,
        epochs: config.encoder_epochs,
        batch_size: config.encoder_batch,
        seed: config.seed,
    };
    let params = finetune_encoder(&base_encoder(config)?, &corpus, Some((&rewrites, config.p)), &options)?;
    params.save(&config.encoder)?;
    Ok(params)
}

/// Scores the test corpus under each strategy and writes one metrics line
/// per (strategy, direction), with deltas against the plain query.
pub fn evaluate(config: &PipelineConfig, strategies: &[Strategy]) -> Result<Vec<MetricsRecord>, PipelineError> {
    let kb = load_kb(config)?;
    let corpus = read_corpus(&config.test_corpus)?;
    let params = EncoderParams::load(&config.encoder)?;
    let policy = if strategies.contains(&Strategy::EvdRewriter) {
        RewritePolicy::load(&config.policy)?
    } else {
        RewritePolicy::default()
    };
    let run = |s: Strategy| recalls(&score_matrix(s, &params, &policy, &kb, &corpus, config.seed), &corpus);
    let baseline = run(Strategy::None);
    let mut out = Vec::new();
    for &s in strategies {
        let result = if s == Strategy::None { baseline.clone() } else { run(s) };
        for ((direction, r), (_, b)) in result.iter().zip(&baseline) {
            out.push(MetricsRecord {
                strategy: s.to_string(),
                direction: direction.clone(),
                r1: r[0],
                r5: r[1],
                r10: r[2],
                n_queries: corpus.len(),
                delta_r1: r[0] - b[0],
                delta_r5: r[1] - b[1],
                delta_r10: r[2] - b[2],
            });
        }
    }
    if let Some(parent) = config.metrics.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(&config.metrics)?;
    for m in &out {
        writeln!(f, "{}", serde_json::to_string(m).expect("metrics serialize"))?;
    }
    Ok(out)
}

pub enum KbEdit {
    Inject {
        entity: String,
        sense_tag: Option<String>,
        descriptions: Vec<String>,
    },
    AddSense {
        entity: String,
        sense_tag: String,
        descriptions: Vec<String>,
        retag_untagged_as: Option<String>,
    },
}

pub fn kb_edit(config: &PipelineConfig, edit: &KbEdit) -> Result<EvdKnowledgeBase, PipelineError> {
    let kb = load_kb(config)?;
    let now = config.now();
    let next = match edit {
        KbEdit::Inject {
            entity,
            sense_tag,
            descriptions,
        } => kb.inject_knowledge(
            &EntitySense::new(entity, sense_tag.as_deref(), Source::Manual),
            descriptions,
            now,
        )?,
        KbEdit::AddSense {
            entity,
            sense_tag,
            descriptions,
            retag_untagged_as,
        } => kb.add_parallel_sense(entity, sense_tag, descriptions, retag_untagged_as.as_deref(), now)?,
    };
    next.save(&config.kb)?;
    Ok(next)
}

/// Writes the bundled synthetic train and test corpora.
pub fn make_corpus(config: &PipelineConfig) -> Result<(usize, usize), PipelineError> {
    use crate::synthetic::{corpus, Split};
    let train = corpus(Split::Train);
    let test = corpus(Split::Test);
    encoder::save_corpus(&train, &config.train_corpus)?;
    encoder::save_corpus(&test, &config.test_corpus)?;
    Ok((train.len(), test.len()))
}

/// Runs every stage in order: KB, dataset, both rewriter phases, retriever
/// fine-tuning and evaluation of all strategies.
pub fn run_all(config: &PipelineConfig) -> Result<Vec<MetricsRecord>, PipelineError> {
    let g = gateway(config)?;
    build_kb(config, &g)?;
    build_dqr(config, &g)?;
    train_rewriter_phase(config, Phase::Warmup)?;
    train_rewriter_phase(config, Phase::Align)?;
    finetune_retriever(config)?;
    evaluate(config, &Strategy::ALL)
}
