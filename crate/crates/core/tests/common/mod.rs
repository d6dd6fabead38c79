//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::{TimeZone, Utc};
use evdrank::encoder::CorpusItem;
use evdrank::kb::{EntitySense, EvdEntry, EvdKnowledgeBase, Source};
use evdrank::rewriter::{action_space, ActionSpace, RewriteAction, RewritePolicy, Template};
pub mod grad;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative error, per unit of loss magnitude.
/// Central differences carry roundoff of about eps_mach * |f| / FD_EPS
/// (2e-11 |f|); the floor sits well above that so near-zero coordinates
/// are judged on absolute error instead of on rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between `grad` and central differences of `f`
/// over the given coordinates of `x`.
pub fn fd_max_rel_err(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) -> f64 {
    let floor = REL_FLOOR * f(x).abs().max(1.0);
    let mut xs = x.to_vec();
    let mut worst: f64 = 0.0;
    for &c in coords {
        let orig = xs[c];
        xs[c] = orig + FD_EPS;
        let up = f(&xs);
        xs[c] = orig - FD_EPS;
        let down = f(&xs);
        xs[c] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(grad[c], numeric, floor));
    }
    worst
}

/// All coordinates with a nonzero analytic gradient plus `extra` random ones.
pub fn check_coords(grad: &[f64], extra: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut set: BTreeSet<usize> = grad.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
    for _ in 0..extra {
        set.insert(rng.random_range(0..grad.len()));
    }
    set.into_iter().collect()
}

const WORDS: &[&str] = &[
    "red", "blue", "tall", "round", "wooden", "metal", "striped", "shiny", "small", "large", "river", "hill",
    "door", "wheel", "roof", "glass", "stone", "green", "soft", "bright",
];

/// Random corpus: each item gets 1..=4 attribute words and a caption made
/// of a subset of them plus noise words.
pub fn random_corpus(n: usize, rng: &mut ChaCha8Rng) -> Vec<CorpusItem> {
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=4);
            let attrs: Vec<String> = (0..k).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
            let mut caption: Vec<String> = attrs.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
            caption.push(WORDS.choose(rng).unwrap().to_string());
            CorpusItem {
                id: format!("item{i:04}"),
                caption: caption.join(" "),
                attributes: attrs,
            }
        })
        .collect()
}

pub fn fixed_time() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn descs(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    while out.len() < n {
        let d = format!(
            "has {} {}",
            WORDS.choose(rng).unwrap(),
            ["color", "shape", "parts", "texture"].choose(rng).unwrap()
        );
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

/// Small KB: three plain entities and a two-sense "bank".
pub fn random_kb(rng: &mut ChaCha8Rng) -> EvdKnowledgeBase {
    let mut kb = EvdKnowledgeBase::default();
    for e in ["tent", "boat", "lamp"] {
        let n = rng.random_range(1..=5);
        kb = kb
            .insert(EvdEntry {
                sense: EntitySense::new(e, None, Source::Llm),
                descriptions: descs(rng, n),
                created_at: fixed_time(),
            })
            .unwrap();
    }
    for tag in ["riverbank", "financial institution"] {
        let n = rng.random_range(1..=5);
        kb = kb
            .insert(EvdEntry {
                sense: EntitySense::new("bank", Some(tag), Source::Llm),
                descriptions: descs(rng, n),
                created_at: fixed_time(),
            })
            .unwrap();
    }
    kb
}

/// Query mentioning 1..=3 KB entities among filler words.
pub fn random_query(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    let mut parts = vec!["a".to_string()];
    for _ in 0..n {
        parts.push(["tent", "boat", "lamp", "bank"].choose(rng).unwrap().to_string());
        parts.push(["near", "by", "and", "under"].choose(rng).unwrap().to_string());
    }
    parts.push("the hill".into());
    parts.join(" ")
}

pub fn random_space(rng: &mut ChaCha8Rng) -> ActionSpace {
    let kb = random_kb(rng);
    action_space(&random_query(rng), &kb, &Template::ALL)
}

pub fn random_actions(space: &ActionSpace, rng: &mut ChaCha8Rng) -> Vec<RewriteAction> {
    space
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| RewriteAction {
            slot: i,
            choice: s.choices.choose(rng).unwrap().clone(),
        })
        .collect()
}

/// Policy with small Gaussian weights over a deliberately small feature
/// space so hash collisions are exercised.
pub fn random_policy(rng: &mut ChaCha8Rng) -> RewritePolicy {
    let mut p = RewritePolicy::new(512, rng.random(), 5, Template::ALL.to_vec());
    let normal = Normal::new(0.0, 0.5).unwrap();
    for t in p.theta.iter_mut() {
        *t = normal.sample(rng);
    }
    p
}

/// Oracle for top-k: full sort by (score desc, id asc).
pub fn brute_force_top_k(scored: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut all = scored.to_vec();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k.max(1));
    all
}

/// Oracle for Recall@h: 1-based rank of the best-ranked truth id, counted
/// by scanning, then the share of queries with rank <= h.
pub fn recall_by_rank_counting(rankings: &[Vec<String>], truths: &[BTreeSet<String>], h: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (ranked, truth) in rankings.iter().zip(truths) {
        let mut rank = usize::MAX;
        for (pos, id) in ranked.iter().enumerate() {
            if truth.contains(id) {
                rank = pos + 1;
                break;
            }
        }
        if rank <= h {
            hits += 1;
        }
    }
    hits as f64 / rankings.len() as f64
}
