use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const NUM_SPECIALS: usize = 3;
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]"];

/// Subword and character inventories. Ids 0..3 are `[PAD]`, `[UNK]`, `[CLS]`
/// in both maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    subwords: Vec<String>,
    chars: Vec<char>,
    subword_ids: HashMap<String, usize>,
    char_ids: HashMap<char, usize>,
    longest: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    subwords: Vec<String>,
    chars: Vec<char>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_parts(r.subwords, r.chars)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            subwords: v.subwords[NUM_SPECIALS..].to_vec(),
            chars: v.chars,
        }
    }
}

impl Vocabulary {
    /// `subwords` and `chars` exclude the special entries.
    pub fn from_parts(subwords: Vec<String>, chars: Vec<char>) -> Self {
        let subwords: Vec<String> = SPECIAL_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(subwords)
            .collect();
        let subword_ids = subwords
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let char_ids = chars.iter().enumerate().map(|(i, &c)| (c, i + NUM_SPECIALS)).collect();
        let longest = subwords[NUM_SPECIALS..].iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Self {
            subwords,
            chars,
            subword_ids,
            char_ids,
            longest,
        }
    }

    pub fn subword_count(&self) -> usize {
        self.subwords.len()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn subword_id(&self, s: &str) -> Option<usize> {
        self.subword_ids.get(s).copied()
    }

    pub fn subword(&self, id: usize) -> Option<&str> {
        self.subwords.get(id).map(String::as_str)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK)
    }

    pub fn has_char(&self, c: char) -> bool {
        self.char_ids.contains_key(&c)
    }

    /// Longest subword length in characters.
    pub fn longest_subword(&self) -> usize {
        self.longest
    }
}

/// Builds the inventories from a text corpus.
///
/// Whitespace-delimited words of two or more characters seen at least twice
/// become subwords (most frequent first, capped at `max_subwords`); every
/// distinct character is also a single-character subword.
pub fn build_vocab<T: AsRef<str>>(corpus: &[T], max_subwords: usize) -> Result<Vocabulary> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut chars = BTreeSet::new();
    for text in corpus {
        let text = text.as_ref();
        chars.extend(text.chars());
        for w in text.split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    if chars.is_empty() {
        return Err(Error::Empty("vocabulary corpus".into()));
    }
    let mut words: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(w, n)| n >= 2 && w.chars().count() >= 2)
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words.truncate(max_subwords);
    let subwords = words
        .into_iter()
        .map(|(w, _)| w.to_string())
        .chain(chars.iter().map(|c| c.to_string()))
        .collect();
    Ok(Vocabulary::from_parts(subwords, chars.into_iter().collect()))
}
