//! Stage-level and end-to-end behavior of the pipeline, the CLI and the
//! remote LLM backend.

mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::*;
use evdrank::encoder::{CorpusItem, EncoderParams};
use evdrank::kb::{EntitySense, EvdEntry, EvdKnowledgeBase, Source};
use evdrank::llm::{Gateway, LlmBackend, LlmError, LlmRequest, RemoteBackend, TemplateName};
use evdrank::pipeline::{
    self, finetune_encoder, recalls, score_matrix, FinetuneOptions, KbEdit, MetricsRecord, PipelineConfig, Strategy,
};
use evdrank::rewriter::RewritePolicy;

fn small_config(dir: &Path) -> PipelineConfig {
    let text = "kb = out/kb.jsonl\ntrain_corpus = data/train.jsonl\ntest_corpus = data/test.jsonl\n\
         dqr = out/dqr.jsonl\nencoder = out/encoder.bin\npolicy_warmup = out/pw.bin\npolicy = out/p.bin\n\
         metrics = out/metrics.jsonl\ncache_dir = out/cache\ntimestamp = 2024-01-01T00:00:00Z\n\
         d_feat = 1024\nd_emb = 32\nrewriter_feature_dim = 4096\n\
         rewriter_warmup_epochs = 3\nrewriter_align_epochs = 3\nencoder_epochs = 2\n";
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    PipelineConfig::load(&path).unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    pipeline::make_corpus(&config).unwrap();
    let metrics = pipeline::run_all(&config).unwrap();
    assert_eq!(metrics.len(), 2 * Strategy::ALL.len());
    for m in &metrics {
        for r in [m.r1, m.r5, m.r10] {
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        if m.strategy == "none" {
            assert_eq!([m.delta_r1, m.delta_r5, m.delta_r10], [0.0; 3]);
        }
    }
    let lines: Vec<MetricsRecord> = fs::read_to_string(&config.metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, metrics);
    for p in [&config.kb, &config.dqr, &config.encoder, &config.policy_warmup, &config.policy] {
        assert!(p.exists(), "{}", p.display());
    }
    let cache = config.cache_dir.as_ref().unwrap();
    assert!(fs::read_dir(cache).unwrap().count() > 0);
}

#[test]
fn single_strategy_evaluation_matches_the_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    pipeline::make_corpus(&config).unwrap();
    let all = pipeline::run_all(&config).unwrap();
    let des = pipeline::evaluate(&config, &[Strategy::DesStyle]).unwrap();
    let from_all: Vec<&MetricsRecord> = all.iter().filter(|m| m.strategy == "des_style").collect();
    assert_eq!(des.iter().collect::<Vec<_>>(), from_all);
}

#[test]
fn zero_rewrite_rate_is_plain_fine_tuning() {
    let mut rng = rng(5);
    let corpus = random_corpus(40, &mut rng);
    let rewrites: Vec<String> = corpus.iter().map(|c| format!("{} with extra words", c.caption)).collect();
    let params = EncoderParams::init(128, 16, 0.07, 1, 2);
    let options = FinetuneOptions {
        learning_rate: 0.05,
        momentum: 0.9,
        epochs: 3,
        batch_size: 8,
        seed: 11,
    };
    let plain = finetune_encoder(&params, &corpus, None, &options).unwrap();
    let zero = finetune_encoder(&params, &corpus, Some((&rewrites, 0.0)), &options).unwrap();
    assert_eq!(plain, zero);
    let some = finetune_encoder(&params, &corpus, Some((&rewrites, 0.5)), &options).unwrap();
    assert_ne!(plain, some);
    assert!(finetune_encoder(&params, &corpus, Some((&rewrites[1..], 0.5)), &options).is_err());
}

#[test]
fn matching_captions_are_retrieved_first() {
    // Caption equals the single attribute, so under tied weights each text
    // embeds exactly onto its own item.
    let words = ["red", "blue", "green", "stone", "glass", "wheel", "river", "roof"];
    let corpus: Vec<CorpusItem> = words
        .iter()
        .enumerate()
        .map(|(i, w)| CorpusItem {
            id: format!("i{i}"),
            caption: w.to_string(),
            attributes: vec![w.to_string()],
        })
        .collect();
    let params = EncoderParams::init(4096, 64, 0.07, 0, 0);
    let scores = score_matrix(
        Strategy::None,
        &params,
        &RewritePolicy::default(),
        &EvdKnowledgeBase::default(),
        &corpus,
        0,
    );
    for (direction, r) in recalls(&scores, &corpus) {
        assert_eq!(r, [1.0; 3], "{direction}");
    }
}

#[test]
fn kb_edits_persist() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.kb = dir.path().join("kb.jsonl");
    EvdKnowledgeBase::default()
        .insert(EvdEntry {
            sense: EntitySense::new("bat", None, Source::Llm),
            descriptions: vec!["has a long handle".into()],
            created_at: fixed_time(),
        })
        .unwrap()
        .save(&config.kb)
        .unwrap();

    pipeline::kb_edit(
        &config,
        &KbEdit::AddSense {
            entity: "bat".into(),
            sense_tag: "animal".into(),
            descriptions: vec!["has leathery wings".into()],
            retag_untagged_as: Some("club".into()),
        },
    )
    .unwrap();
    pipeline::kb_edit(
        &config,
        &KbEdit::Inject {
            entity: "kayak".into(),
            sense_tag: None,
            descriptions: vec!["has a double paddle".into()],
        },
    )
    .unwrap();

    let kb = EvdKnowledgeBase::load(&config.kb).unwrap();
    let tags: Vec<Option<String>> = kb.lookup("bat", None).iter().map(|e| e.sense.sense_tag.clone()).collect();
    assert_eq!(tags, [Some("animal".to_string()), Some("club".to_string())]);
    let kayak = kb.lookup("kayak", None);
    assert_eq!(kayak[0].sense.source, Source::Manual);
    assert_eq!(kayak[0].created_at, fixed_time());
}

#[test]
fn cached_responses_skip_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.cache_dir = Some(dir.path().join("cache"));
    let sense = EntitySense::new("tent", None, Source::Llm);
    let first = pipeline::gateway(&config).unwrap();
    let a = first.generate_descriptions(&sense, 5).unwrap();
    let second = pipeline::gateway(&config).unwrap();
    let b = second.generate_descriptions(&sense, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(second.cache().unwrap().hits(), 1);
    assert_eq!(second.cache().unwrap().misses(), 0);
}

#[test]
fn cli_runs_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let conf = dir.path().join("run.conf");
    let bin = env!("CARGO_BIN_EXE_evdrank");
    let run = |args: &[&str]| {
        let out = Command::new(bin).arg("--config").arg(&conf).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    assert!(run(&["make-corpus"]).contains("120 training"));
    run(&["build-kb"]);
    run(&["build-dqr"]);
    run(&["train-rewriter", "--phase", "warmup"]);
    run(&["train-rewriter", "--phase", "align"]);
    run(&["finetune-retriever"]);
    let report = run(&["evaluate", "--strategy", "evd-rewriter"]);
    assert!(report.contains("evd_rewriter"), "{report}");
    run(&["kb-edit", "--op", "inject", "--entity", "kayak", "--desc", "has a double paddle"]);

    let bad = Command::new(bin).args(["--config", "/nonexistent.conf", "build-kb"]).output().unwrap();
    assert!(!bad.status.success());
}

/// Minimal HTTP server answering each request with the next scripted
/// (status, body) pair. Returns the endpoint and a request counter.
fn scripted_server(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&count);
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            let request: serde_json::Value = serde_json::from_slice(&request).unwrap();
            assert!(request["messages"].as_array().is_some_and(|m| !m.is_empty()));
            seen.fetch_add(1, Ordering::SeqCst);
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (endpoint, count)
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn extract_request() -> LlmRequest {
    LlmRequest::new(TemplateName::ExtractEntities, &[("caption", "a tent by the river".into())], 0.0, 0)
}

fn remote(endpoint: &str) -> RemoteBackend {
    RemoteBackend::new(endpoint, "test-model")
        .unwrap()
        .with_token(None)
        .with_retries(3, Duration::from_millis(5))
}

#[test]
fn remote_backend_retries_transient_failures() {
    let (endpoint, count) = scripted_server(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, chat("1. tent\n2. river")),
    ]);
    let gateway = Gateway::new(Box::new(remote(&endpoint)), 0);
    assert_eq!(gateway.extract_visual_entities("a tent by the river").unwrap(), ["tent", "river"]);
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_backend_gives_up_after_retries() {
    let (endpoint, count) = scripted_server(vec![(500, String::new()); 4]);
    let err = remote(&endpoint).complete(&extract_request()).unwrap_err();
    assert!(matches!(err, LlmError::BackendUnavailable(_)), "{err:?}");
    assert_eq!(count.load(Ordering::SeqCst), 4);
}

#[test]
fn remote_backend_does_not_retry_client_errors() {
    let (endpoint, count) = scripted_server(vec![(401, "no".into()), (200, chat("tent"))]);
    let err = remote(&endpoint).complete(&extract_request()).unwrap_err();
    assert!(matches!(err, LlmError::BackendUnavailable(_)), "{err:?}");
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_backend_rejects_malformed_bodies() {
    let (endpoint, _) = scripted_server(vec![(200, "{\"nope\": 1}".into()), (200, "{\"choices\": []}".into())]);
    let backend = remote(&endpoint);
    for _ in 0..2 {
        let err = backend.complete(&extract_request()).unwrap_err();
        assert!(matches!(err, LlmError::MalformedResponse(_)), "{err:?}");
    }
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = RemoteBackend::new(&format!("http://127.0.0.1:{port}/"), "m")
        .unwrap()
        .with_retries(1, Duration::from_millis(1));
    let err = backend.complete(&extract_request()).unwrap_err();
    assert!(matches!(err, LlmError::BackendUnavailable(_)), "{err:?}");
}
