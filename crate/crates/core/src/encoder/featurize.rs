//! Signed feature hashing for captions and attribute bags.
//!
//! Text contributes word unigrams and adjacent-word bigrams; an item
//! contributes one token per attribute. Both go through the same hash, so the
//! text bigram `"guy ropes"` and the attribute `"guy ropes"` land in the same
//! bucket with the same sign.

use crate::text;

/// Smallest accepted feature dimension.
pub const MIN_FEATURE_DIM: usize = 16;

/// Sparse count vector: `(bucket, value)` pairs, sorted by bucket, no zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec(pub Vec<(usize, f64)>);

impl SparseVec {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, bucket: usize) -> f64 {
        self.0
            .binary_search_by_key(&bucket, |&(b, _)| b)
            .map(|i| self.0[i].1)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, f64)> {
        self.0.iter()
    }

    fn from_unsorted(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|&(b, _)| b);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (b, v) in pairs {
            match out.last_mut() {
                Some(last) if last.0 == b => last.1 += v,
                _ => out.push((b, v)),
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        Self(out)
    }
}

// 64-bit FNV-1a, salted. Stable across platforms and releases, unlike
// `std::hash::DefaultHasher`.
fn fnv1a(salt: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in salt.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Bucket and sign of a token under `hash_seed`.
pub fn hash_token(token: &str, d_feat: usize, hash_seed: u64) -> (usize, f64) {
    let bucket = (fnv1a(hash_seed, token.as_bytes()) % d_feat as u64) as usize;
    let sign_bits = fnv1a(hash_seed ^ 0x9e37_79b9_7f4a_7c15, token.as_bytes());
    let sign = if sign_bits >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Unigram and bigram tokens of a caption.
pub fn text_tokens(s: &str) -> Vec<String> {
    let words = text::tokens(s);
    let mut toks = words.clone();
    toks.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    toks
}

pub fn featurize_tokens<S: AsRef<str>>(tokens: &[S], d_feat: usize, hash_seed: u64) -> SparseVec {
    assert!(d_feat >= MIN_FEATURE_DIM, "d_feat must be at least {MIN_FEATURE_DIM}");
    SparseVec::from_unsorted(
        tokens
            .iter()
            .map(|t| hash_token(t.as_ref(), d_feat, hash_seed))
            .collect(),
    )
}

pub fn featurize_text(s: &str, d_feat: usize, hash_seed: u64) -> SparseVec {
    featurize_tokens(&text_tokens(s), d_feat, hash_seed)
}

pub fn featurize_attributes<S: AsRef<str>>(attributes: &[S], d_feat: usize, hash_seed: u64) -> SparseVec {
    let toks: Vec<String> = attributes
        .iter()
        .map(|a| text::normalize_phrase(a.as_ref()))
        .filter(|a| !a.is_empty())
        .collect();
    featurize_tokens(&toks, d_feat, hash_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_zero() {
        assert!(featurize_text("", 64, 1).is_empty());
    }

    #[test]
    fn deterministic() {
        let a = featurize_text("a red tent near the river", 256, 9);
        let b = featurize_text("a red tent near the river", 256, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn repeated_word_counts_twice() {
        let d = 1 << 16;
        let (tent, _) = hash_token("tent", d, 3);
        let (bigram, _) = hash_token("tent tent", d, 3);
        assert_ne!(tent, bigram, "seed chosen to avoid a collision");
        let v = featurize_text("tent tent", d, 3);
        assert_eq!(v.get(tent).abs(), 2.0);
        assert_eq!(v.0.len(), 2);
    }

    #[test]
    fn text_and_attribute_tokens_share_buckets() {
        let t = featurize_text("tent", 128, 5);
        let i = featurize_attributes(&["Tent"], 128, 5);
        assert_eq!(t, i);
    }

    #[test]
    fn bigrams_included() {
        assert_eq!(text_tokens("a b c"), ["a", "b", "c", "a b", "b c"]);
    }
}
