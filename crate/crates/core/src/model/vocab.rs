use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const SOS: usize = 4;
pub const EOS: usize = 5;
pub const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]", "[SOS]", "[EOS]"];

/// Splits on whitespace, lowercases, and peels `,` `?` `.` off as tokens.
/// Reserved markers such as `[SOS]` pass through unchanged.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if RESERVED.contains(&piece) {
            out.push(piece.to_string());
            continue;
        }
        let lower = piece.to_lowercase();
        let word = lower.trim_end_matches([',', '?', '.']);
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(lower[word.len()..].chars().map(String::from));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocabulary {
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocabulary {
    fn from(words: Vec<String>) -> Self {
        let lookup = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, lookup }
    }
}

impl From<TokenVocabulary> for Vec<String> {
    fn from(v: TokenVocabulary) -> Self {
        v.words
    }
}

impl TokenVocabulary {
    /// Reserved ids first, then every corpus word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for w in tokenize(t) {
                if !RESERVED.contains(&w.as_str()) {
                    set.insert(w);
                }
            }
        }
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        words.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `[CLS]` followed by at most `max_len` word ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let tokens = tokenize(text);
        if tokens.len() > max_len {
            log::debug!("text of {} tokens truncated to {max_len}", tokens.len());
        }
        std::iter::once(CLS)
            .chain(tokens.iter().take(max_len).map(|w| self.id(w)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids that are ordinary words (candidates for random replacement).
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        RESERVED.len()..self.words.len()
    }
}
