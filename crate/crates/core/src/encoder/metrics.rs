use std::collections::BTreeSet;

/// Fraction of queries whose first `h` ranked ids contain a ground-truth id.
///
/// `rankings[q]` is the ranked id list for query `q` and `truths[q]` its
/// relevant ids. An empty query set yields 0.
pub fn recall_at_h(rankings: &[Vec<String>], truths: &[BTreeSet<String>], h: usize) -> f64 {
    assert_eq!(rankings.len(), truths.len(), "one truth set per ranking");
    assert!(h >= 1, "h must be positive");
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(ranked, truth)| ranked.iter().take(h).any(|id| truth.contains(id)))
        .count();
    hits as f64 / rankings.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ranking with the truth id `t` at 1-based position `rank`.
    fn ranked(rank: usize) -> (Vec<String>, BTreeSet<String>) {
        let mut r: Vec<String> = (0..40).map(|i| format!("x{i}")).collect();
        r.insert(rank - 1, "t".into());
        (r, BTreeSet::from(["t".to_string()]))
    }

    #[test]
    fn single_query() {
        let (r, t) = ranked(1);
        assert_eq!(recall_at_h(&[r], &[t], 1), 1.0);
        let (r, t) = ranked(6);
        assert_eq!(recall_at_h(std::slice::from_ref(&r), std::slice::from_ref(&t), 5), 0.0);
        assert_eq!(recall_at_h(&[r], &[t], 10), 1.0);
    }

    #[test]
    fn four_queries() {
        let (rs, ts): (Vec<_>, Vec<_>) = [1, 2, 7, 30].into_iter().map(ranked).unzip();
        assert_eq!(recall_at_h(&rs, &ts, 5), 0.5);
    }
}
