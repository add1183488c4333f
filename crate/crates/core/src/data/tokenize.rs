//! Greedy longest-match segmentation with per-character timing alignment.

use serde::{Deserialize, Serialize};

use super::events::KeystrokeSample;
use super::normalize::{normalize_times, TimeStats};
use super::vocab::{self, Vocabulary};

/// One subword with its characters and their normalized (hold, flight) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenUnit {
    pub subword_id: usize,
    pub char_ids: Vec<usize>,
    pub hold: Vec<f64>,
    pub flight: Vec<f64>,
}

impl TokenUnit {
    pub fn cls() -> Self {
        Self {
            subword_id: vocab::CLS,
            char_ids: vec![vocab::CLS],
            hold: vec![0.0],
            flight: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}

/// A tokenized sample. `tokens[0]` is always `[CLS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub user_id: String,
    pub session_id: String,
    pub tokens: Vec<TokenUnit>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn subword_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.subword_id).collect()
    }

    /// Characters carried by the content tokens (everything after `[CLS]`).
    pub fn keystroke_count(&self) -> usize {
        self.tokens.iter().skip(1).map(TokenUnit::len).sum()
    }

    /// Copy with every temporal feature set to zero.
    pub fn without_timing(&self) -> Self {
        let mut s = self.clone();
        for t in &mut s.tokens {
            t.hold.iter_mut().for_each(|v| *v = 0.0);
            t.flight.iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }
}

/// Segments the typed characters into subwords and attaches each character's
/// normalized timing. Whitespace keys become single-character tokens, unknown
/// characters become `[UNK]` tokens, and a `[CLS]` token with zero timing is
/// prepended.
pub fn tokenize_align(sample: &KeystrokeSample, vocab: &Vocabulary, stats: &TimeStats) -> TokenizedSequence {
    let symbols = sample.symbols();
    let mut tokens = vec![TokenUnit::cls()];
    let mut pos = 0;
    while pos < symbols.len() {
        let word_end = if symbols[pos].is_whitespace() {
            pos + 1
        } else {
            symbols[pos..]
                .iter()
                .position(|c| c.is_whitespace())
                .map_or(symbols.len(), |k| pos + k)
        };
        let max_len = vocab.longest_subword().min(word_end - pos).max(1);
        let (len, id) = (1..=max_len)
            .rev()
            .find_map(|len| {
                let piece: String = symbols[pos..pos + len].iter().collect();
                vocab.subword_id(&piece).map(|id| (len, id))
            })
            .unwrap_or((1, vocab::UNK));
        let mut unit = TokenUnit {
            subword_id: id,
            char_ids: Vec::with_capacity(len),
            hold: Vec::with_capacity(len),
            flight: Vec::with_capacity(len),
        };
        for j in pos..pos + len {
            let (d, f) = normalize_times(sample.hold_ms[j], sample.flight_ms[j], stats);
            unit.char_ids.push(vocab.char_id(symbols[j]));
            unit.hold.push(d);
            unit.flight.push(f);
        }
        tokens.push(unit);
        pos += len;
    }
    TokenizedSequence {
        user_id: sample.user_id.clone(),
        session_id: sample.session_id.clone(),
        tokens,
    }
}
