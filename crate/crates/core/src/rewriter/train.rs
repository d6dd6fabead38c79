use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{align_loss_prepared, PreferenceList, PreparedPreference, SftExample};
use super::policy::{PreparedSequence, RewritePolicy};
use super::space::{action_space, ActionSpace};
use super::RewriteError;
use crate::dqr::DqrRecord;
use crate::kb::EvdKnowledgeBase;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Supervised log-likelihood on each record's best label.
    Warmup,
    /// Preference-rank loss plus weighted supervised loss on full lists.
    Align,
}

/// Where preference rewards come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// Min-max normalized retrieval scores (default).
    Score,
    /// Length-normalized log-probability under the policy at the start of
    /// alignment, frozen as constants.
    PolicyLogprob,
}

#[derive(Debug, Clone)]
pub struct RewriterTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Records per gradient step; 0 means full batch.
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
    pub reward: RewardMode,
}

impl Default for RewriterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 16,
            beta: 0.2,
            seed: 0,
            reward: RewardMode::Score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub records_used: usize,
    pub records_skipped: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let size = if batch_size == 0 { n.max(1) } else { batch_size };
    order.chunks(size).map(|c| c.to_vec()).collect()
}

/// Runs one training phase and returns the updated policy.
pub fn train_rewriter(
    policy: &RewritePolicy,
    kb: &EvdKnowledgeBase,
    records: &[DqrRecord],
    phase: Phase,
    config: &RewriterTrainConfig,
) -> Result<(RewritePolicy, TrainReport), RewriteError> {
    if records.is_empty() {
        return Err(RewriteError::EmptyDataset);
    }
    if !(config.learning_rate > 0.0) || !(config.beta >= 0.0) {
        return Err(RewriteError::InvalidConfig(format!(
            "learning rate {} / beta {}",
            config.learning_rate, config.beta
        )));
    }

    let spaces: Vec<ActionSpace> = records
        .iter()
        .map(|r| action_space(&r.x, kb, &policy.templates))
        .collect();

    // Per-record (preference list, sft label); records without a usable
    // list are skipped.
    let mut units: Vec<(Option<(ActionSpace, PreferenceList)>, SftExample)> = Vec::new();
    let mut skipped = 0;
    for (rec, space) in records.iter().zip(&spaces) {
        let Some(best) = rec.candidates.first() else {
            skipped += 1;
            continue;
        };
        let sft = SftExample {
            space: space.clone(),
            actions: best.actions.clone(),
        };
        match phase {
            Phase::Warmup => units.push((None, sft)),
            Phase::Align => {
                let pref = match config.reward {
                    RewardMode::Score => PreferenceList::from_scores(&rec.x, &rec.candidates),
                    RewardMode::PolicyLogprob => {
                        let rewards = rec
                            .candidates
                            .iter()
                            .map(|c| {
                                policy
                                    .logprob(space, &c.actions)
                                    .map(|(lp, _)| lp / c.actions.len().max(1) as f64)
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        PreferenceList::new(&rec.x, rec.candidates.clone(), rewards)
                    }
                };
                if pref.len() < 2 {
                    skipped += 1;
                    continue;
                }
                units.push((Some((space.clone(), pref)), sft));
            }
        }
    }

    if units.is_empty() {
        warn!("all {} records skipped (tied or single-candidate rankings); policy unchanged", records.len());
        return Ok((
            policy.clone(),
            TrainReport {
                steps: 0,
                records_used: 0,
                records_skipped: skipped,
                initial_loss: 0.0,
                final_loss: 0.0,
            },
        ));
    }

    // Warmup is the alignment objective with no preference term and unit
    // supervised weight.
    let beta = match phase {
        Phase::Warmup => 1.0,
        Phase::Align => config.beta,
    };
    // Features depend only on the feature hash, so every unit is prepared once.
    let prepared: Vec<(Option<PreparedPreference>, PreparedSequence)> = units
        .iter()
        .map(|(pref, sft)| {
            let p = pref
                .as_ref()
                .map(|(space, list)| PreparedPreference::new(policy, space, list))
                .transpose()?;
            Ok((p, policy.prepare(&sft.space, &sft.actions)?))
        })
        .collect::<Result<_, RewriteError>>()?;
    let loss_on = |theta: &RewritePolicy, idx: &[usize], grad: Option<&mut [f64]>| {
        let prefs: Vec<&PreparedPreference> = idx.iter().filter_map(|&i| prepared[i].0.as_ref()).collect();
        let sft: Vec<&PreparedSequence> = idx.iter().map(|&i| &prepared[i].1).collect();
        align_loss_prepared(theta, &prefs, &sft, beta, grad)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = policy.clone();
    let all: Vec<usize> = (0..units.len()).collect();
    let initial_loss = loss_on(&theta, &all, None);
    let mut steps = 0;
    let mut g = vec![0.0; theta.feature_dim()];
    for _ in 0..config.epochs {
        for idx in batches(units.len(), config.batch_size, &mut rng) {
            g.iter_mut().for_each(|v| *v = 0.0);
            loss_on(&theta, &idx, Some(&mut g));
            for (t, gi) in theta.theta.iter_mut().zip(&g) {
                *t -= config.learning_rate * gi;
            }
            steps += 1;
        }
    }
    let final_loss = loss_on(&theta, &all, None);
    info!(
        "{phase:?}: {steps} steps over {} records, loss {initial_loss:.4} -> {final_loss:.4}",
        units.len()
    );
    Ok((
        theta,
        TrainReport {
            steps,
            records_used: units.len(),
            records_skipped: skipped,
            initial_loss,
            final_loss,
        },
    ))
}
