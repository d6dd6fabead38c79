//! Symmetric InfoNCE over a batch of matched (item, text) pairs.
//!
//! With unit item embeddings `u_i`, unit text embeddings `v_j` and logits
//! `S_ij = u_i . v_j / tau`:
//!
//! ```text
//! L_i2t = -(1/N) sum_i log softmax_j(S_i.)[i]
//! L_t2i = -(1/N) sum_j log softmax_i(S_.j)[j]
//! L     = L_i2t + L_t2i
//! ```
//!
//! Gradients flow back through the L2 normalization and the sparse
//! projections. Reductions run in a fixed order so results are bit-stable.

use super::featurize::SparseVec;
use super::params::{normalize, project, Embedding, EncoderParams};
use super::{CorpusItem, EncoderError};

/// Batch of N pairs; text `j` describes item `j`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a> {
    pub items: Vec<&'a CorpusItem>,
    pub texts: Vec<String>,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(items: Vec<&'a CorpusItem>, texts: Vec<String>) -> Result<Self, EncoderError> {
        if items.is_empty() || items.len() != texts.len() {
            return Err(EncoderError::InvalidBatch {
                items: items.len(),
                texts: texts.len(),
            });
        }
        Ok(Self { items, texts })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Gradients with the same layout as [`EncoderParams`] matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w_text: Vec<f64>,
    pub w_item: Vec<f64>,
}

impl EncoderGrads {
    fn zeros(n: usize) -> Self {
        Self {
            w_text: vec![0.0; n],
            w_item: vec![0.0; n],
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        for (a, b) in self.w_text.iter_mut().zip(&other.w_text) {
            *a += b;
        }
        for (a, b) in self.w_item.iter_mut().zip(&other.w_item) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w_text
            .iter()
            .chain(&self.w_item)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct DirectionalLoss {
    pub loss: f64,
    pub grad: EncoderGrads,
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub i2t: DirectionalLoss,
    pub t2i: DirectionalLoss,
}

impl ContrastiveLoss {
    pub fn total(&self) -> f64 {
        self.i2t.loss + self.t2i.loss
    }

    pub fn total_grad(&self) -> EncoderGrads {
        let mut g = self.i2t.grad.clone();
        g.add(&self.t2i.grad);
        g
    }
}

struct Tower {
    feats: Vec<SparseVec>,
    emb: Vec<Embedding>,
    norms: Vec<f64>,
}

fn tower(w: &[f64], d_emb: usize, feats: Vec<SparseVec>) -> Tower {
    let (emb, norms) = feats
        .iter()
        .map(|f| normalize(project(w, d_emb, f)))
        .unzip();
    Tower { feats, emb, norms }
}

struct Forward {
    items: Tower,
    texts: Tower,
    logits: Vec<Vec<f64>>,
}

fn forward(params: &EncoderParams, batch: &ContrastiveBatch<'_>) -> Forward {
    let items = tower(
        &params.w_item,
        params.d_emb,
        batch.items.iter().map(|it| params.item_features(it)).collect(),
    );
    let texts = tower(
        &params.w_text,
        params.d_emb,
        batch.texts.iter().map(|t| params.text_features(t)).collect(),
    );
    let logits = items
        .emb
        .iter()
        .map(|u| {
            texts
                .emb
                .iter()
                .map(|v| super::similarity(u, v) / params.tau)
                .collect()
        })
        .collect();
    Forward {
        items,
        texts,
        logits,
    }
}

/// Stable log-softmax of `row` evaluated at `target`, plus the full softmax.
fn log_softmax_at(row: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (row[target] - lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Loss for one direction and its logit gradient `dL/dS`.
fn direction(logits: &[Vec<f64>], transpose: bool) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut g = vec![vec![0.0; n]; n];
    for a in 0..n {
        let row: Vec<f64> = if transpose {
            (0..n).map(|i| logits[i][a]).collect()
        } else {
            logits[a].clone()
        };
        let (lp, probs) = log_softmax_at(&row, a);
        loss -= lp * inv_n;
        for (b, p) in probs.into_iter().enumerate() {
            let d = (p - if a == b { 1.0 } else { 0.0 }) * inv_n;
            if transpose {
                g[b][a] = d;
            } else {
                g[a][b] = d;
            }
        }
    }
    (loss, g)
}

/// Backpropagates `dL/dS` to the projection matrices.
fn backward(params: &EncoderParams, fwd: &Forward, g: &[Vec<f64>]) -> EncoderGrads {
    let d = params.d_emb;
    let n = g.len();
    let mut grads = EncoderGrads::zeros(params.d_feat * d);

    let push = |w_grad: &mut [f64], feats: &SparseVec, emb: &Embedding, norm: f64, du: &[f64]| {
        if norm == 0.0 {
            return;
        }
        let u = emb.values();
        let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = du
            .iter()
            .zip(u)
            .map(|(gi, ui)| (gi - ui * dot) / norm)
            .collect();
        for &(k, v) in feats.iter() {
            let row = &mut w_grad[k * d..(k + 1) * d];
            for (r, z) in row.iter_mut().zip(&dz) {
                *r += v * z;
            }
        }
    };

    for i in 0..n {
        let mut du = vec![0.0; d];
        for j in 0..n {
            let c = g[i][j] / params.tau;
            for (acc, v) in du.iter_mut().zip(fwd.texts.emb[j].values()) {
                *acc += c * v;
            }
        }
        push(
            &mut grads.w_item,
            &fwd.items.feats[i],
            &fwd.items.emb[i],
            fwd.items.norms[i],
            &du,
        );
    }
    for j in 0..n {
        let mut dv = vec![0.0; d];
        for i in 0..n {
            let c = g[i][j] / params.tau;
            for (acc, u) in dv.iter_mut().zip(fwd.items.emb[i].values()) {
                *acc += c * u;
            }
        }
        push(
            &mut grads.w_text,
            &fwd.texts.feats[j],
            &fwd.texts.emb[j],
            fwd.texts.norms[j],
            &dv,
        );
    }
    grads
}

/// Both directional losses with their analytic gradients.
pub fn contrastive_loss(
    params: &EncoderParams,
    batch: &ContrastiveBatch<'_>,
) -> Result<ContrastiveLoss, EncoderError> {
    let fwd = forward(params, batch);
    let (l_i2t, g_i2t) = direction(&fwd.logits, false);
    let (l_t2i, g_t2i) = direction(&fwd.logits, true);
    if !(l_i2t.is_finite() && l_t2i.is_finite()) {
        return Err(EncoderError::NonFiniteLoss);
    }
    Ok(ContrastiveLoss {
        i2t: DirectionalLoss {
            loss: l_i2t,
            grad: backward(params, &fwd, &g_i2t),
        },
        t2i: DirectionalLoss {
            loss: l_t2i,
            grad: backward(params, &fwd, &g_t2i),
        },
    })
}

/// Loss value only; skips the backward pass.
pub fn contrastive_loss_value(
    params: &EncoderParams,
    batch: &ContrastiveBatch<'_>,
) -> Result<f64, EncoderError> {
    let fwd = forward(params, batch);
    let total = direction(&fwd.logits, false).0 + direction(&fwd.logits, true).0;
    if total.is_finite() {
        Ok(total)
    } else {
        Err(EncoderError::NonFiniteLoss)
    }
}

/// Total loss and its gradient with a single backward pass.
pub fn contrastive_total(
    params: &EncoderParams,
    batch: &ContrastiveBatch<'_>,
) -> Result<(f64, EncoderGrads), EncoderError> {
    let fwd = forward(params, batch);
    let (l1, g1) = direction(&fwd.logits, false);
    let (l2, g2) = direction(&fwd.logits, true);
    let total = l1 + l2;
    if !total.is_finite() {
        return Err(EncoderError::NonFiniteLoss);
    }
    let g: Vec<Vec<f64>> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    Ok((total, backward(params, &fwd, &g)))
}

/// Gradient descent with optional heavy-ball momentum. Temperature is fixed.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<EncoderGrads>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    /// One update on `batch`; returns the loss before the update.
    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        batch: &ContrastiveBatch<'_>,
    ) -> Result<f64, EncoderError> {
        let (loss, grad) = contrastive_total(params, batch)?;
        let update = if self.momentum > 0.0 {
            let v = self
                .velocity
                .get_or_insert_with(|| EncoderGrads::zeros(grad.w_text.len()));
            for (vi, gi) in v.w_text.iter_mut().zip(&grad.w_text) {
                *vi = self.momentum * *vi + gi;
            }
            for (vi, gi) in v.w_item.iter_mut().zip(&grad.w_item) {
                *vi = self.momentum * *vi + gi;
            }
            v.clone()
        } else {
            grad
        };
        let lr = self.learning_rate;
        for (w, g) in params.w_text.iter_mut().zip(&update.w_text) {
            *w -= lr * g;
        }
        for (w, g) in params.w_item.iter_mut().zip(&update.w_item) {
            *w -= lr * g;
        }
        Ok(loss)
    }
}

/// One plain gradient-descent step on the total loss.
pub fn train_step(
    params: &EncoderParams,
    batch: &ContrastiveBatch<'_>,
    learning_rate: f64,
) -> Result<EncoderParams, EncoderError> {
    if !(learning_rate > 0.0) {
        return Err(EncoderError::InvalidParams(format!(
            "learning rate {learning_rate} must be positive"
        )));
    }
    let mut next = params.clone();
    Sgd::new(learning_rate, 0.0).step(&mut next, batch)?;
    Ok(next)
}
