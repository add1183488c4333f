//! Keystroke ingestion, tokenization and dataset preparation.

pub mod csv_io;
pub mod events;
pub mod normalize;
pub mod split;
pub mod synth;
pub mod tokenize;
pub mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use csv_io::{parse_dataset, write_dataset, DataFormat};
pub use events::{derive_times, FlightMode, KeystrokeEvent, KeystrokeSample};
pub use normalize::{normalize_times, TimeStats};
pub use split::split_samples;
pub use synth::{standard_benchmark, synth_generate, SynthConfig, UserProfile};
pub use tokenize::{tokenize_align, TokenUnit, TokenizedSequence};
pub use vocab::{build_vocab, Vocabulary};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_ratio: f64,
    pub max_subwords: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_ratio: 0.2,
            max_subwords: 2000,
        }
    }
}

/// Train/test split with its vocabulary, timing statistics and user roster.
///
/// Vocabulary and statistics come from the training samples only.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
    pub train_raw: Vec<KeystrokeSample>,
    pub test_raw: Vec<KeystrokeSample>,
    /// Sorted user ids; a user's label is its index here.
    pub roster: Vec<String>,
    pub vocab: Vocabulary,
    pub stats: TimeStats,
}

impl DatasetSplit {
    /// Splits `samples` per user and prepares both sides.
    pub fn prepare(samples: &[KeystrokeSample], config: &SplitConfig, seed: u64) -> Result<Self> {
        let (train, test) = split_samples(samples, config.test_ratio, seed)?;
        let texts: Vec<String> = train.iter().map(KeystrokeSample::text).collect();
        let vocab = build_vocab(&texts, config.max_subwords)?;
        let stats = TimeStats::from_samples(&train)?;
        Self::from_parts(train, test, vocab, stats)
    }

    /// Tokenizes already-split samples with a fixed vocabulary and statistics.
    pub fn from_parts(
        train_raw: Vec<KeystrokeSample>,
        test_raw: Vec<KeystrokeSample>,
        vocab: Vocabulary,
        stats: TimeStats,
    ) -> Result<Self> {
        if train_raw.is_empty() {
            return Err(Error::Empty("training split".into()));
        }
        let roster: Vec<String> = train_raw
            .iter()
            .map(|s| s.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(s) = test_raw.iter().find(|s| roster.binary_search(&s.user_id).is_err()) {
            return Err(Error::MissingUser(s.user_id.clone()));
        }
        let tok = |v: &[KeystrokeSample]| v.iter().map(|s| tokenize_align(s, &vocab, &stats)).collect();
        Ok(Self {
            train: tok(&train_raw),
            test: tok(&test_raw),
            train_raw,
            test_raw,
            roster,
            vocab,
            stats,
        })
    }

    pub fn num_users(&self) -> usize {
        self.roster.len()
    }

    pub fn label_of(&self, user_id: &str) -> Result<usize> {
        self.roster
            .binary_search_by(|u| u.as_str().cmp(user_id))
            .map_err(|_| Error::MissingUser(user_id.to_string()))
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| self.label_of(&s.user_id).expect("roster covers train")).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|s| self.label_of(&s.user_id).expect("roster covers test")).collect()
    }

    /// SHA-256 over the ordered sample keys of both sides.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, side) in [("train", &self.train_raw), ("test", &self.test_raw)] {
            h.update(tag.as_bytes());
            for s in side {
                h.update(s.user_id.as_bytes());
                h.update([0]);
                h.update(s.session_id.as_bytes());
                h.update([1]);
            }
        }
        hex::encode(h.finalize())
    }
}
