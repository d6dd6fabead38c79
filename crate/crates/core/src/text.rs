//! Word tokenization shared by entity linking, featurization, and rendering.

/// A lowercase word together with its byte span in the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits `s` into maximal runs of alphanumeric characters.
///
/// Every other character (whitespace, punctuation, brackets) is a separator.
/// Returned words are lowercased; spans point into the original string.
pub fn words(s: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in s.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(st) = start.take() {
            out.push(Word {
                text: s[st..i].to_lowercase(),
                start: st,
                end: i,
            });
        }
    }
    if let Some(st) = start {
        out.push(Word {
            text: s[st..].to_lowercase(),
            start: st,
            end: s.len(),
        });
    }
    out
}

/// Lowercase word strings of `s`, without spans.
pub fn tokens(s: &str) -> Vec<String> {
    words(s).into_iter().map(|w| w.text).collect()
}

/// Canonical form of an entity or phrase: lowercase words joined by one space.
pub fn normalize_phrase(s: &str) -> String {
    tokens(s).join(" ")
}

/// Whether `needle` occurs in `haystack` as an ordered (not necessarily
/// contiguous) subsequence.
pub fn is_subsequence<T: PartialEq>(needle: &[T], haystack: &[T]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}
