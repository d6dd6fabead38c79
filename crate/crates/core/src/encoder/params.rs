use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::featurize::{featurize_attributes, featurize_text, SparseVec, MIN_FEATURE_DIM};
use super::{CorpusItem, EncoderError};

pub const DEFAULT_D_FEAT: usize = 4096;
pub const DEFAULT_D_EMB: usize = 64;
pub const DEFAULT_TAU: f64 = 0.07;

const FORMAT: &str = "evdrank-encoder";
const SCHEMA_VERSION: u32 = 1;

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dot product of two unit embeddings.
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    debug_assert_eq!(a.0.len(), b.0.len());
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Projection matrices for both towers plus the softmax temperature.
///
/// Matrices are `d_feat x d_emb`, row-major: row `k` is the embedding
/// contribution of hash bucket `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_text: Vec<f64>,
    pub w_item: Vec<f64>,
    pub tau: f64,
    pub d_feat: usize,
    pub d_emb: usize,
    pub hash_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    d_feat: usize,
    d_emb: usize,
    tau: f64,
    hash_seed: u64,
}

/// Projects a sparse feature vector through `w` into an unnormalized vector.
pub(crate) fn project(w: &[f64], d_emb: usize, f: &SparseVec) -> Vec<f64> {
    let mut z = vec![0.0; d_emb];
    for &(k, v) in f.iter() {
        let row = &w[k * d_emb..(k + 1) * d_emb];
        for (zi, wi) in z.iter_mut().zip(row) {
            *zi += v * wi;
        }
    }
    z
}

/// L2-normalizes `z`, mapping the zero vector to the first basis vector.
/// Returns the embedding and the pre-normalization norm (0 when degenerate).
pub(crate) fn normalize(z: Vec<f64>) -> (Embedding, f64) {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
        let mut e = vec![0.0; z.len()];
        e[0] = 1.0;
        return (Embedding(e), 0.0);
    }
    (Embedding(z.into_iter().map(|v| v / norm).collect()), norm)
}

impl EncoderParams {
    /// Tied initialization: both towers share one Gaussian projection with
    /// entry variance `1 / d_emb`, so an item whose attributes equal a
    /// text's tokens embeds to the same point as that text.
    pub fn init(d_feat: usize, d_emb: usize, tau: f64, hash_seed: u64, init_seed: u64) -> Self {
        assert!(d_feat >= MIN_FEATURE_DIM && d_emb >= 1 && tau > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let normal = Normal::new(0.0, 1.0 / (d_emb as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..d_feat * d_emb).map(|_| normal.sample(&mut rng)).collect();
        Self {
            w_text: w.clone(),
            w_item: w,
            tau,
            d_feat,
            d_emb,
            hash_seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let n = self.d_feat * self.d_emb;
        if self.w_text.len() != n || self.w_item.len() != n {
            return Err(EncoderError::InvalidParams("matrix shape mismatch".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(EncoderError::InvalidParams(format!("tau = {}", self.tau)));
        }
        if self.w_text.iter().chain(&self.w_item).any(|v| !v.is_finite()) {
            return Err(EncoderError::InvalidParams("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn text_features(&self, text: &str) -> SparseVec {
        featurize_text(text, self.d_feat, self.hash_seed)
    }

    pub fn item_features(&self, item: &CorpusItem) -> SparseVec {
        featurize_attributes(&item.attributes, self.d_feat, self.hash_seed)
    }

    pub fn encode_text(&self, text: &str) -> Embedding {
        normalize(project(&self.w_text, self.d_emb, &self.text_features(text))).0
    }

    pub fn encode_item(&self, item: &CorpusItem) -> Embedding {
        normalize(project(&self.w_item, self.d_emb, &self.item_features(item))).0
    }

    /// Content hash identifying this exact parameter set.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.d_feat.to_le_bytes());
        h.update(self.d_emb.to_le_bytes());
        h.update(self.tau.to_le_bytes());
        h.update(self.hash_seed.to_le_bytes());
        for v in self.w_text.iter().chain(&self.w_item) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let header = Header {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            d_feat: self.d_feat,
            d_emb: self.d_emb,
            tau: self.tau,
            hash_seed: self.hash_seed,
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        buf.reserve(16 * self.w_text.len());
        for v in self.w_text.iter().chain(&self.w_item) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
        if header.format != FORMAT || header.schema_version != SCHEMA_VERSION {
            return Err(EncoderError::Checkpoint(format!(
                "unsupported checkpoint {}/{}",
                header.format, header.schema_version
            )));
        }
        let n = header.d_feat * header.d_emb;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 16 * n {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} matrix bytes, found {}",
                16 * n,
                bytes.len()
            )));
        }
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let w_text: Vec<f64> = vals.by_ref().take(n).collect();
        let w_item: Vec<f64> = vals.collect();
        let params = Self {
            w_text,
            w_item,
            tau: header.tau,
            d_feat: header.d_feat,
            d_emb: header.d_emb,
            hash_seed: header.hash_seed,
        };
        params.validate()?;
        Ok(params)
    }
}
