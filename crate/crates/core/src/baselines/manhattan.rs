//! Nearest-profile classifier under L1 distance.
//!
//! A sample is summarised by the mean hold and flight time per character
//! class (vowel, consonant, space, other) plus the mean and standard deviation
//! of hold and flight over the whole sample, all in raw milliseconds. Classes
//! absent from a sample fall back to the sample-wide means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::synth::{CharClass, NUM_CLASSES};
use crate::data::KeystrokeSample;
use crate::error::{Error, Result};

pub const FEATURE_LEN: usize = 2 * NUM_CLASSES + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManhattanProfile {
    pub user_id: String,
    pub features: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn features(sample: &KeystrokeSample) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Empty(format!("sample {}/{}", sample.user_id, sample.session_id)));
    }
    let (hm, hs) = mean_std(&sample.hold_ms);
    let (fm, fs) = mean_std(&sample.flight_ms);
    let mut sums = [[0.0f64; 2]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for ((c, h), f) in sample.symbols().into_iter().zip(&sample.hold_ms).zip(&sample.flight_ms) {
        let k = CharClass::of(c).index();
        sums[k][0] += h;
        sums[k][1] += f;
        counts[k] += 1;
    }
    let mut out = Vec::with_capacity(FEATURE_LEN);
    for k in 0..NUM_CLASSES {
        if counts[k] == 0 {
            out.extend([hm, fm]);
        } else {
            out.extend([sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64]);
        }
    }
    out.extend([hm, hs, fm, fs]);
    Ok(out)
}

/// Per-user mean feature vectors, sorted by user id.
pub fn build_profiles(train: &[KeystrokeSample]) -> Result<Vec<ManhattanProfile>> {
    let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for s in train {
        let f = features(s)?;
        let e = acc.entry(&s.user_id).or_insert_with(|| (vec![0.0; FEATURE_LEN], 0));
        e.0.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    Ok(acc
        .into_iter()
        .map(|(u, (sum, n))| ManhattanProfile {
            user_id: u.to_string(),
            features: sum.into_iter().map(|v| v / n as f64).collect(),
        })
        .collect())
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Nearest profile and its distance; ties go to the lexicographically smallest user id.
pub fn manhattan_classify<'a>(features: &[f64], profiles: &'a [ManhattanProfile]) -> Result<(&'a str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for p in profiles {
        if p.features.len() != features.len() {
            return Err(Error::shape("manhattan_classify", &[features.len()], &[p.features.len()]));
        }
        let d = l1(features, &p.features);
        best = match best {
            Some((u, bd)) if bd < d || (bd == d && u <= p.user_id.as_str()) => Some((u, bd)),
            _ => Some((&p.user_id, d)),
        };
    }
    best.ok_or_else(|| Error::Empty("no profiles".into()))
}

/// Similarity in (0, 1] used for authentication scoring.
pub fn similarity(distance: f64) -> f64 {
    1.0 / (1.0 + distance)
}
