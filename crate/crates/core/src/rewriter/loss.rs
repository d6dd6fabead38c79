//! Training objectives for the rewrite policy: supervised log-likelihood,
//! the Bradley-Terry pairwise preference, listwise preference-rank loss with
//! reward-gap temperatures, and their weighted combination.

use super::policy::{PreparedSequence, RewritePolicy};
use super::space::{ActionSpace, RewriteAction, RewriteCandidate};
use super::RewriteError;

/// Rewards closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-9;

/// `exp(r1) / (exp(r1) + exp(r2))`, evaluated as a logistic of the gap.
pub fn bt_probability(r1: f64, r2: f64) -> f64 {
    let d = r1 - r2;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// A query with rewrite candidates ranked by reward, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceList {
    pub x: String,
    pub candidates: Vec<RewriteCandidate>,
    pub rewards: Vec<f64>,
}

impl PreferenceList {
    /// Sorts by reward (descending, stable) and collapses near-ties onto the
    /// higher-ranked candidate.
    pub fn new(x: &str, candidates: Vec<RewriteCandidate>, rewards: Vec<f64>) -> Self {
        assert_eq!(candidates.len(), rewards.len());
        let mut paired: Vec<(RewriteCandidate, f64)> = candidates.into_iter().zip(rewards).collect();
        paired.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut kept: Vec<(RewriteCandidate, f64)> = Vec::with_capacity(paired.len());
        for (c, r) in paired {
            match kept.last() {
                Some((_, prev)) if prev - r < TIE_EPSILON => {}
                _ => kept.push((c, r)),
            }
        }
        let (candidates, rewards) = kept.into_iter().unzip();
        Self {
            x: x.to_string(),
            candidates,
            rewards,
        }
    }

    /// Rewards are the candidates' retrieval scores min-max normalized to
    /// `[0, 1]` within the list. Candidates without a score are dropped.
    pub fn from_scores(x: &str, candidates: &[RewriteCandidate]) -> Self {
        let scored: Vec<&RewriteCandidate> = candidates.iter().filter(|c| c.score.is_some()).collect();
        let scores: Vec<f64> = scored.iter().map(|c| c.score.unwrap_or_default()).collect();
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let rewards = scores
            .iter()
            .map(|s| if range > 0.0 { (s - lo) / range } else { 0.0 })
            .collect();
        Self::new(x, scored.into_iter().cloned().collect(), rewards)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn check_strict(&self) -> Result<(), RewriteError> {
        if self.candidates.is_empty() || self.candidates.len() != self.rewards.len() {
            return Err(RewriteError::DegenerateRanking);
        }
        if self
            .rewards
            .windows(2)
            .any(|w| !(w[0] - w[1] >= TIE_EPSILON) || !w[0].is_finite())
        {
            return Err(RewriteError::DegenerateRanking);
        }
        Ok(())
    }
}

/// `T_j^i = 1 / (r_j - r_i)` for `i > j`, and `T_j^j = min_{i>j} T_j^i`.
/// Returned as inverse temperatures `1 / T` (the reward gaps), indexed
/// `[j][i - j]`.
pub fn inverse_temperatures(rewards: &[f64]) -> Vec<Vec<f64>> {
    let k = rewards.len();
    (0..k.saturating_sub(1))
        .map(|j| {
            let gaps: Vec<f64> = (j + 1..k).map(|i| rewards[j] - rewards[i]).collect();
            let own = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            std::iter::once(own).chain(gaps).collect()
        })
        .collect()
}

/// Length-normalized log-probability; identity rewrites count as length 1.
fn normalized(lp: f64, slots: usize) -> f64 {
    lp / slots.max(1) as f64
}

/// Listwise loss on policy scores `pi` (best first) with the given rewards,
/// and `dL/dpi`.
pub fn pro_loss_on_scores(pi: &[f64], rewards: &[f64]) -> (f64, Vec<f64>) {
    let k = pi.len();
    let mut loss = 0.0;
    let mut d = vec![0.0; k];
    for (j, inv_t) in inverse_temperatures(rewards).iter().enumerate() {
        let logits: Vec<f64> = (j..k).map(|i| pi[i] * inv_t[i - j]).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= logits[0] - (max + sum.ln());
        d[j] -= inv_t[0];
        for (off, e) in exps.iter().enumerate() {
            d[j + off] += e / sum * inv_t[off];
        }
    }
    (loss, d)
}

/// A preference list with its action space and precomputed features.
#[derive(Debug, Clone)]
pub struct PreparedPreference {
    pub rewards: Vec<f64>,
    sequences: Vec<PreparedSequence>,
}

impl PreparedPreference {
    pub fn new(policy: &RewritePolicy, space: &ActionSpace, pref: &PreferenceList) -> Result<Self, RewriteError> {
        pref.check_strict()?;
        let sequences = pref
            .candidates
            .iter()
            .map(|c| policy.prepare(space, &c.actions))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rewards: pref.rewards.clone(),
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Loss, adding `scale * dL/dtheta` into `grad`.
    pub fn loss(&self, policy: &RewritePolicy, grad: Option<(&mut [f64], f64)>) -> f64 {
        let pi: Vec<f64> = self
            .sequences
            .iter()
            .map(|s| normalized(policy.logprob_prepared(s, None), s.slot_count()))
            .collect();
        let (loss, d_pi) = pro_loss_on_scores(&pi, &self.rewards);
        if let Some((g, scale)) = grad {
            for (s, dp) in self.sequences.iter().zip(d_pi) {
                if dp != 0.0 {
                    let c = scale * dp / s.slot_count().max(1) as f64;
                    policy.logprob_prepared(s, Some((&mut *g, c)));
                }
            }
        }
        loss
    }
}

/// Supervised example: the best-scoring rewrite of a query.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub space: ActionSpace,
    pub actions: Vec<RewriteAction>,
}

fn sft_on_prepared(policy: &RewritePolicy, seqs: &[&PreparedSequence], g: Option<(&mut [f64], f64)>) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let n = seqs.len() as f64;
    let mut loss = 0.0;
    match g {
        Some((g, scale)) => {
            for s in seqs {
                loss -= policy.logprob_prepared(s, Some((&mut *g, -scale / n)));
            }
        }
        None => {
            for s in seqs {
                loss -= policy.logprob_prepared(s, None);
            }
        }
    }
    loss / n
}

/// `mean PRO + beta * mean SFT` over prepared inputs, accumulating the
/// gradient into `grad` when given.
pub fn align_loss_prepared(
    policy: &RewritePolicy,
    prefs: &[&PreparedPreference],
    sft: &[&PreparedSequence],
    beta: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = prefs.len().max(1) as f64;
    let mut pro = 0.0;
    match grad {
        Some(g) => {
            for p in prefs {
                pro += p.loss(policy, Some((&mut *g, 1.0 / n)));
            }
            pro / n + beta * sft_on_prepared(policy, sft, Some((g, beta)))
        }
        None => {
            for p in prefs {
                pro += p.loss(policy, None);
            }
            pro / n + beta * sft_on_prepared(policy, sft, None)
        }
    }
}

pub(crate) fn prepare_sft(policy: &RewritePolicy, data: &[SftExample]) -> Result<Vec<PreparedSequence>, RewriteError> {
    data.iter().map(|e| policy.prepare(&e.space, &e.actions)).collect()
}

/// Mean negative log-likelihood of the labels, and its gradient.
pub fn sft_loss(policy: &RewritePolicy, data: &[SftExample]) -> Result<(f64, Vec<f64>), RewriteError> {
    let seqs = prepare_sft(policy, data)?;
    let refs: Vec<&PreparedSequence> = seqs.iter().collect();
    let mut g = vec![0.0; policy.feature_dim()];
    let loss = sft_on_prepared(policy, &refs, Some((&mut g, 1.0)));
    Ok((loss, g))
}

/// Listwise preference-rank loss of one list, and its gradient.
pub fn pro_loss(
    policy: &RewritePolicy,
    space: &ActionSpace,
    pref: &PreferenceList,
) -> Result<(f64, Vec<f64>), RewriteError> {
    let prepared = PreparedPreference::new(policy, space, pref)?;
    let mut g = vec![0.0; policy.feature_dim()];
    let loss = prepared.loss(policy, Some((&mut g, 1.0)));
    Ok((loss, g))
}

/// Precomputed inputs of the alignment objective.
#[derive(Debug, Clone)]
pub struct AlignBatch {
    prefs: Vec<PreparedPreference>,
    sft: Vec<PreparedSequence>,
}

impl AlignBatch {
    pub fn new(
        policy: &RewritePolicy,
        prefs: &[(ActionSpace, PreferenceList)],
        sft: &[SftExample],
    ) -> Result<Self, RewriteError> {
        Ok(Self {
            prefs: prefs
                .iter()
                .map(|(s, p)| PreparedPreference::new(policy, s, p))
                .collect::<Result<_, _>>()?,
            sft: prepare_sft(policy, sft)?,
        })
    }

    pub fn loss(&self, policy: &RewritePolicy, beta: f64, grad: Option<&mut [f64]>) -> f64 {
        let prefs: Vec<&PreparedPreference> = self.prefs.iter().collect();
        let sft: Vec<&PreparedSequence> = self.sft.iter().collect();
        align_loss_prepared(policy, &prefs, &sft, beta, grad)
    }
}

/// Combined alignment objective and its gradient.
pub fn align_loss(
    policy: &RewritePolicy,
    prefs: &[(ActionSpace, PreferenceList)],
    sft: &[SftExample],
    beta: f64,
) -> Result<(f64, Vec<f64>), RewriteError> {
    if !(beta >= 0.0) {
        return Err(RewriteError::InvalidConfig(format!("beta {beta} must be non-negative")));
    }
    let batch = AlignBatch::new(policy, prefs, sft)?;
    let mut g = vec![0.0; policy.feature_dim()];
    let loss = batch.loss(policy, beta, Some(&mut g));
    Ok((loss, g))
}
