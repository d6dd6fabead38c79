//! Invariants over randomly generated inputs.

mod common;

use common::*;
use evdrank::dqr::select_improvers;
use evdrank::encoder::{contrastive_loss, ContrastiveBatch, EncoderParams};
use evdrank::kb::EvdKnowledgeBase;
use evdrank::pipeline::order_free_mean;
use evdrank::rewriter::{bt_probability, inverse_temperatures, PreferenceList, RewriteCandidate};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kb_survives_save_and_load(seed in any::<u64>()) {
        let kb = random_kb(&mut rng(seed));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        kb.save(&path).unwrap();
        let back = EvdKnowledgeBase::load(&path).unwrap();
        prop_assert_eq!(kb.entries().collect::<Vec<_>>(), back.entries().collect::<Vec<_>>());
    }

    #[test]
    fn entity_links_are_disjoint_whole_words(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let kb = random_kb(&mut rng);
        let query = random_query(&mut rng);
        let matches = kb.link_entities(&query);
        prop_assert!(!matches.is_empty());
        for w in matches.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
        for m in &matches {
            prop_assert_eq!(&query[m.start..m.end], m.entity.as_str());
            let before = query[..m.start].chars().next_back();
            let after = query[m.end..].chars().next();
            prop_assert!(before.is_none_or(|c| !c.is_alphanumeric()));
            prop_assert!(after.is_none_or(|c| !c.is_alphanumeric()));
        }
    }

    #[test]
    fn rendered_rewrites_parse_back(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let space = random_space(&mut rng);
        let actions = random_actions(&space, &mut rng);
        let text = space.render(&actions).unwrap();
        let parsed = space.infer_actions(&text).expect("own rendering parses");
        prop_assert_eq!(space.render(&parsed).unwrap(), text);
    }

    #[test]
    fn identity_rewrite_is_the_query(seed in any::<u64>()) {
        let space = random_space(&mut rng(seed));
        prop_assert_eq!(space.render(&space.identity_actions()).unwrap(), space.query.clone());
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in any::<u64>(), draw in any::<u64>()) {
        let mut rng = rng(seed);
        let space = random_space(&mut rng);
        let policy = random_policy(&mut rng);
        prop_assert_eq!(policy.decode_sample(&space, draw, 1.0), policy.decode_sample(&space, draw, 1.0));
    }

    #[test]
    fn contrastive_loss_ignores_batch_order(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n = rng.random_range(1..=8);
        let corpus = random_corpus(n, &mut rng);
        let params = EncoderParams::init(64, 8, 0.07, rng.random(), rng.random());
        let loss = |order: &[usize]| {
            let batch = ContrastiveBatch::new(
                order.iter().map(|&i| &corpus[i]).collect(),
                order.iter().map(|&i| corpus[i].caption.clone()).collect(),
            )
            .unwrap();
            contrastive_loss(&params, &batch).unwrap().total()
        };
        let mut order: Vec<usize> = (0..n).collect();
        let base = loss(&order);
        order.shuffle(&mut rng);
        prop_assert!((loss(&order) - base).abs() <= 1e-12 * base.abs().max(1.0));
        prop_assert!(base >= 0.0);
        if n == 1 {
            prop_assert_eq!(base, 0.0);
        }
    }

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), text in "[a-z !?]{0,30}") {
        let mut rng = rng(seed);
        let params = EncoderParams::init(64, 8, 0.07, rng.random(), rng.random());
        let item = random_corpus(1, &mut rng).remove(0);
        for e in [params.encode_text(&text), params.encode_item(&item)] {
            prop_assert!((e.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn order_free_mean_is_permutation_invariant(mut v in prop::collection::vec(-1.0f64..1.0, 1..12), seed in any::<u64>()) {
        let m = order_free_mean(&v);
        v.shuffle(&mut rng(seed));
        prop_assert_eq!(order_free_mean(&v), m);
    }

    #[test]
    fn bt_probabilities_are_complementary(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let p = bt_probability(a, b);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + bt_probability(b, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temperatures_ignore_reward_shift(mut r in prop::collection::vec(-1.0f64..1.0, 1..8), c in -5.0f64..5.0) {
        r.sort_by(|x, y| y.total_cmp(x));
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (a, b) in inverse_temperatures(&r).iter().zip(inverse_temperatures(&shifted)) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x >= 0.0);
            }
        }
    }

    #[test]
    fn preference_rewards_strictly_decrease(rewards in prop::collection::vec(-1.0f64..1.0, 1..8)) {
        let cands: Vec<RewriteCandidate> = (0..rewards.len())
            .map(|i| RewriteCandidate { actions: vec![], text: format!("c{i}"), score: None, logprob: None })
            .collect();
        let pref = PreferenceList::new("q", cands, rewards);
        for w in pref.rewards.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn improvers_beat_the_original_in_order(
        original in -1.0f64..1.0,
        scores in prop::collection::vec((-1.0f64..1.0, 0usize..4), 0..12),
        best_only in any::<bool>(),
    ) {
        let cands: Vec<RewriteCandidate> = scores
            .iter()
            .map(|&(s, t)| RewriteCandidate { actions: vec![], text: format!("t{t}"), score: Some(s), logprob: None })
            .collect();
        let kept = select_improvers(original, cands, best_only);
        prop_assert!(!best_only || kept.len() <= 1);
        for c in &kept {
            prop_assert!(c.score.unwrap() > original);
        }
        for w in kept.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
            prop_assert!(w[0].text != w[1].text);
        }
    }
}
