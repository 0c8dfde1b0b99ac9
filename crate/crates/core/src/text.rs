//! Small text utilities shared by tokenization, term matching and masking.

use unicode_normalization::UnicodeNormalization;

pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// A lowercased copy of a string that remembers, for each byte of the
/// lowercased text, which original character it came from.
///
/// `char::to_lowercase` can expand one character into several, so byte
/// offsets in the folded text do not line up with the original.
pub struct Folded<'a> {
    original: &'a str,
    pub folded: String,
    /// For each folded byte: (start, end) byte range of the source character.
    origin: Vec<(usize, usize)>,
}

impl<'a> Folded<'a> {
    pub fn new(original: &'a str) -> Self {
        let mut folded = String::with_capacity(original.len());
        let mut origin = Vec::with_capacity(original.len());
        for (start, c) in original.char_indices() {
            let end = start + c.len_utf8();
            for lc in c.to_lowercase() {
                let before = folded.len();
                folded.push(lc);
                origin.extend(std::iter::repeat_n((start, end), folded.len() - before));
            }
        }
        Self {
            original,
            folded,
            origin,
        }
    }

    /// Maps a byte range of the folded text back onto the original text.
    pub fn original_span(&self, start: usize, end: usize) -> (usize, usize) {
        debug_assert!(start < end && end <= self.folded.len());
        (self.origin[start].0, self.origin[end - 1].1)
    }

    pub fn original(&self) -> &'a str {
        self.original
    }

    /// All (possibly overlapping) case-insensitive occurrences of `needle`,
    /// as byte spans of the original text.
    pub fn find_all(&self, needle: &str) -> Vec<(usize, usize)> {
        let needle = needle.to_lowercase();
        if needle.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut from = 0;
        while let Some(pos) = self.folded[from..].find(&needle) {
            let s = from + pos;
            out.push(self.original_span(s, s + needle.len()));
            from = s + self.folded[s..].chars().next().map_or(1, char::len_utf8);
        }
        out
    }
}

pub fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// True when the span `[start, end)` of `text` does not cut through a token,
/// i.e. no alphanumeric run continues across either edge.
pub fn aligned_to_tokens(text: &str, start: usize, end: usize) -> bool {
    let span = &text[start..end];
    let (Some(first), Some(last)) = (span.chars().next(), span.chars().next_back()) else {
        return false;
    };
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    let left_ok = !(is_word_char(first) && before.is_some_and(is_word_char));
    let right_ok = !(is_word_char(last) && after.is_some_and(is_word_char));
    left_ok && right_ok
}

/// Byte offset to character offset.
pub fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}
