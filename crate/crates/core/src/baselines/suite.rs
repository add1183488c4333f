//! Comparative identification/authentication report over one pinned split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lstm::{FrozenEncoder, LstmClassifier, StepSource};
use super::manhattan;
use crate::data::{DatasetSplit, TokenizedSequence};
use crate::error::{Error, Result};
use crate::eval::{self, compute_eer, ScoreSet};
use crate::model::TempCharModel;
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteRow {
    Manhattan,
    Lstm,
    LstmCharbert,
    LstmTempchar,
    CharOnly,
    TempChar,
}

impl SuiteRow {
    pub const ALL: [SuiteRow; 6] = [
        SuiteRow::Manhattan,
        SuiteRow::Lstm,
        SuiteRow::LstmCharbert,
        SuiteRow::LstmTempchar,
        SuiteRow::CharOnly,
        SuiteRow::TempChar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteRow::Manhattan => "manhattan",
            SuiteRow::Lstm => "lstm",
            SuiteRow::LstmCharbert => "lstm_charbert",
            SuiteRow::LstmTempchar => "lstm_tempchar",
            SuiteRow::CharOnly => "char_only",
            SuiteRow::TempChar => "temp_char",
        }
    }

    fn seed_offset(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmSettings {
    pub hidden: usize,
    pub layers: usize,
    pub train: TrainConfig,
}

impl Default for LstmSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 1,
            train: TrainConfig::default(),
        }
    }
}

/// Trained models the suite reads from; rows that need a missing one fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteArtifacts<'a> {
    pub char_only: Option<&'a TempCharModel<f64>>,
    pub temp_char: Option<&'a TempCharModel<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub accuracy: f64,
    pub eer: f64,
    pub eer_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub split_hash: String,
    pub rows: BTreeMap<String, RowResult>,
}

pub fn manhattan_row(split: &DatasetSplit) -> Result<RowResult> {
    let profiles = manhattan::build_profiles(&split.train_raw)?;
    let mut preds = Vec::with_capacity(split.test_raw.len());
    let mut scores = ScoreSet::default();
    for s in &split.test_raw {
        let f = manhattan::features(s)?;
        let (u, _) = manhattan::manhattan_classify(&f, &profiles)?;
        preds.push(split.label_of(u)?);
        for p in &profiles {
            let sim = manhattan::similarity(manhattan::l1(&f, &p.features));
            if p.user_id == s.user_id {
                scores.genuine.push(sim);
            } else {
                scores.impostor.push(sim);
            }
        }
    }
    let accuracy = eval::accuracy(&preds, &split.test_labels())?;
    let (eer, eer_threshold) = compute_eer(&scores)?;
    Ok(RowResult {
        accuracy,
        eer,
        eer_threshold,
    })
}

fn needed<'a>(m: Option<&'a TempCharModel<f64>>, row: SuiteRow, what: &str) -> Result<&'a TempCharModel<f64>> {
    m.ok_or_else(|| Error::Config(format!("row `{}` needs a trained {what} model", row.as_str())))
}

/// Trains an LSTM row on the split and evaluates it like the main model.
pub fn lstm_row(split: &DatasetSplit, source: StepSource<f64>, settings: &LstmSettings, seed: u64) -> Result<RowResult> {
    let mut net = LstmClassifier::new(source, settings.hidden, settings.layers, split.num_users(), seed)?;
    let train: Vec<&TokenizedSequence> = split.train.iter().collect();
    fit(&mut net, &train, &split.train_labels(), &settings.train, seed)?;
    let r = eval::evaluate(&net, split)?;
    Ok(RowResult {
        accuracy: r.accuracy,
        eer: r.eer,
        eer_threshold: r.eer_threshold,
    })
}

pub fn run_baseline_suite(
    split: &DatasetSplit,
    rows: &[SuiteRow],
    artifacts: SuiteArtifacts<'_>,
    lstm: &LstmSettings,
    seed: u64,
) -> Result<SuiteReport> {
    let mut out = BTreeMap::new();
    for &row in rows {
        let s = seed.wrapping_add(row.seed_offset());
        let result = match row {
            SuiteRow::Manhattan => manhattan_row(split)?,
            SuiteRow::Lstm => lstm_row(
                split,
                StepSource::Raw {
                    char_vocab: split.vocab.char_count(),
                },
                lstm,
                s,
            )?,
            SuiteRow::LstmCharbert => {
                let m = needed(artifacts.char_only, row, "char_only")?;
                lstm_row(split, StepSource::Encoder(FrozenEncoder::from_model(m, false)), lstm, s)?
            }
            SuiteRow::LstmTempchar => {
                let m = needed(artifacts.temp_char, row, "temp_char")?;
                lstm_row(split, StepSource::Encoder(FrozenEncoder::from_model(m, true)), lstm, s)?
            }
            SuiteRow::CharOnly | SuiteRow::TempChar => {
                let m = if row == SuiteRow::CharOnly {
                    needed(artifacts.char_only, row, "char_only")?
                } else {
                    needed(artifacts.temp_char, row, "temp_char")?
                };
                let r = eval::evaluate(m, split)?;
                RowResult {
                    accuracy: r.accuracy,
                    eer: r.eer,
                    eer_threshold: r.eer_threshold,
                }
            }
        };
        log::info!("{}: accuracy {:.4} eer {:.4}", row.as_str(), result.accuracy, result.eer);
        out.insert(row.as_str().to_string(), result);
    }
    Ok(SuiteReport {
        seed,
        split_hash: split.split_hash(),
        rows: out,
    })
}
