//! Answer normalization shared by token F1 and the lexical entailment oracle.

use std::collections::BTreeMap;

/// Multiset of normalized tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBag {
    counts: BTreeMap<String, usize>,
    len: usize,
}

impl TokenBag {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self, token: &str) -> usize {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Size of the multiset intersection.
    pub fn overlap(&self, other: &TokenBag) -> usize {
        self.counts
            .iter()
            .map(|(tok, &n)| n.min(other.count(tok)))
            .sum()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenBag {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut bag = TokenBag::default();
        for tok in iter {
            *bag.counts.entry(tok.into()).or_insert(0) += 1;
            bag.len += 1;
        }
        bag
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2010}'..='\u{2027}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}')
}

/// Lowercases, replaces punctuation with whitespace and splits.
///
/// Punctuation acts as a separator, so `13--18` yields `13` and `18`.
pub fn normalize_answer_tokens(text: &str) -> TokenBag {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().collect()
}
