//! Random instances for gradient checks: analytic gradients against
//! central finite differences.

use super::*;
use evdrank::encoder::{contrastive_loss, ContrastiveBatch, CorpusItem, EncoderParams};
use evdrank::rewriter::{
    align_loss, pro_loss, sft_loss, ActionSpace, AlignBatch, PreferenceList, PreparedPreference,
    RewritePolicy, SftExample,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Instances per loss, and the pass threshold on max relative error.
pub const INSTANCES: u64 = 20;
pub const GRAD_TOL: f64 = 1e-5;

fn untied_params(rng: &mut ChaCha8Rng) -> EncoderParams {
    let tau = [0.07, 0.3, 1.0][rng.random_range(0..3)];
    let mut p = EncoderParams::init(32, 6, tau, rng.random(), rng.random());
    let normal = Normal::new(0.0, 0.2).unwrap();
    for w in p.w_item.iter_mut() {
        *w += normal.sample(rng);
    }
    p
}

fn with_flat(p: &EncoderParams, x: &[f64]) -> EncoderParams {
    let n = p.w_text.len();
    let mut q = p.clone();
    q.w_text.copy_from_slice(&x[..n]);
    q.w_item.copy_from_slice(&x[n..]);
    q
}

/// Max relative error of one contrastive direction on a random instance.
pub fn contrastive_instance(seed: u64, t2i: bool) -> f64 {
    let mut rng = rng(seed);
    let params = untied_params(&mut rng);
    let n = rng.random_range(2..=6);
    let corpus: Vec<CorpusItem> = random_corpus(n, &mut rng);
    let texts: Vec<String> = corpus.iter().map(|c| c.caption.clone()).collect();
    let batch = ContrastiveBatch::new(corpus.iter().collect(), texts).unwrap();
    let pick = |l: &evdrank::encoder::ContrastiveLoss| if t2i { l.t2i.clone() } else { l.i2t.clone() };
    let d = pick(&contrastive_loss(&params, &batch).unwrap());
    let flat: Vec<f64> = params.w_text.iter().chain(&params.w_item).copied().collect();
    let grad: Vec<f64> = d.grad.w_text.iter().chain(&d.grad.w_item).copied().collect();
    let coords: Vec<usize> = (0..flat.len()).collect();
    fd_max_rel_err(
        |x| pick(&contrastive_loss(&with_flat(&params, x), &batch).unwrap()).loss,
        &flat,
        &grad,
        &coords,
    )
}

fn with_theta(p: &RewritePolicy, theta: &[f64]) -> RewritePolicy {
    let mut q = p.clone();
    q.theta.copy_from_slice(theta);
    q
}

fn sft_data(rng: &mut ChaCha8Rng) -> Vec<SftExample> {
    (0..rng.random_range(1..=4))
        .map(|_| {
            let space = random_space(rng);
            let actions = random_actions(&space, rng);
            SftExample { space, actions }
        })
        .collect()
}

/// Preference list with 2..=5 distinct candidates and distinct rewards.
fn preference(rng: &mut ChaCha8Rng) -> (ActionSpace, PreferenceList) {
    loop {
        let space = random_space(rng);
        let k = rng.random_range(2..=5);
        let mut cands = Vec::new();
        for _ in 0..50 {
            let a = random_actions(&space, rng);
            let c = space.candidate(a).unwrap();
            if !cands.iter().any(|d: &evdrank::rewriter::RewriteCandidate| d.actions == c.actions) {
                cands.push(c);
            }
            if cands.len() == k {
                break;
            }
        }
        if cands.len() < 2 {
            continue;
        }
        let rewards: Vec<f64> = cands.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let pref = PreferenceList::new(&space.query, cands, rewards);
        if pref.len() >= 2 {
            return (space, pref);
        }
    }
}

pub fn sft_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let policy = random_policy(&mut rng);
    let data = sft_data(&mut rng);
    let (_, grad) = sft_loss(&policy, &data).unwrap();
    let coords = check_coords(&grad, 20, &mut rng);
    // Features do not depend on theta, so the probes reuse them.
    let prepared = AlignBatch::new(&policy, &[], &data).unwrap();
    fd_max_rel_err(|t| prepared.loss(&with_theta(&policy, t), 1.0, None), &policy.theta, &grad, &coords)
}

pub fn pro_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let policy = random_policy(&mut rng);
    let (space, pref) = preference(&mut rng);
    let (_, grad) = pro_loss(&policy, &space, &pref).unwrap();
    let coords = check_coords(&grad, 20, &mut rng);
    let prepared = PreparedPreference::new(&policy, &space, &pref).unwrap();
    fd_max_rel_err(
        |t| prepared.loss(&with_theta(&policy, t), None),
        &policy.theta,
        &grad,
        &coords,
    )
}

pub fn align_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let policy = random_policy(&mut rng);
    let prefs: Vec<(ActionSpace, PreferenceList)> = (0..rng.random_range(1..=3)).map(|_| preference(&mut rng)).collect();
    let sft = sft_data(&mut rng);
    let beta = rng.random_range(0.0..1.0);
    let (_, grad) = align_loss(&policy, &prefs, &sft, beta).unwrap();
    let coords = check_coords(&grad, 20, &mut rng);
    let prepared = AlignBatch::new(&policy, &prefs, &sft).unwrap();
    fd_max_rel_err(
        |t| prepared.loss(&with_theta(&policy, t), beta, None),
        &policy.theta,
        &grad,
        &coords,
    )
}

/// Worst error over the seeded instances of one check.
pub fn worst(f: impl Fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(|s| f(1000 + s)).fold(0.0, f64::max)
}
