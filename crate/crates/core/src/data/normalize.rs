use serde::{Deserialize, Serialize};

use super::events::KeystrokeSample;
use crate::error::{Error, Result};

pub const CLIP: f64 = 5.0;

/// Mean and population standard deviation of hold and flight times,
/// computed on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub hold_mean: f64,
    pub hold_std: f64,
    pub flight_mean: f64,
    pub flight_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TimeStats {
    pub fn from_samples(train: &[KeystrokeSample]) -> Result<Self> {
        if train.iter().all(KeystrokeSample::is_empty) {
            return Err(Error::Empty("no keystrokes to compute time statistics".into()));
        }
        let (hold_mean, hold_std) = mean_std(train.iter().flat_map(|s| s.hold_ms.iter().copied()));
        let (flight_mean, flight_std) = mean_std(train.iter().flat_map(|s| s.flight_ms.iter().copied()));
        Ok(Self {
            hold_mean,
            hold_std,
            flight_mean,
            flight_std,
        })
    }
}

fn zscore(x: f64, mean: f64, std: f64) -> f64 {
    let scale = if std > 0.0 { std } else { 1.0 };
    ((x - mean) / scale).clamp(-CLIP, CLIP)
}

/// Z-scores a (hold, flight) pair with training statistics, clipped to ±5.
/// A zero standard deviation falls back to plain mean-centering.
pub fn normalize_times(d_ms: f64, f_ms: f64, stats: &TimeStats) -> (f64, f64) {
    (
        zscore(d_ms, stats.hold_mean, stats.hold_std),
        zscore(f_ms, stats.flight_mean, stats.flight_std),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(hold: Vec<f64>, flight: Vec<f64>) -> KeystrokeSample {
        let keys = vec![(65, Some('a')); hold.len()];
        KeystrokeSample::from_precomputed("u", "0", keys, hold, flight).unwrap()
    }

    #[test]
    fn mean_maps_to_zero() {
        let stats = TimeStats::from_samples(&[sample(vec![100.0, 140.0], vec![0.0, 40.0])]).unwrap();
        assert_eq!(normalize_times(120.0, 20.0, &stats), (0.0, 0.0));
    }

    #[test]
    fn constant_hold_uses_identity_scale() {
        let stats = TimeStats::from_samples(&[sample(vec![90.0; 3], vec![0.0, 10.0, 20.0])]).unwrap();
        assert_eq!(stats.hold_std, 0.0);
        assert_eq!(normalize_times(90.0, 10.0, &stats).0, 0.0);
        assert_eq!(normalize_times(92.0, 10.0, &stats).0, 2.0);
    }

    #[test]
    fn hand_computed_zscores() {
        // holds 2, 4, 4, 6: mean 4, population variance (4+0+0+4)/4 = 2
        let stats = TimeStats::from_samples(&[sample(vec![2.0, 4.0, 4.0, 6.0], vec![0.0; 4])]).unwrap();
        let s2 = 2f64.sqrt();
        let z: Vec<f64> = [2.0, 4.0, 4.0, 6.0].iter().map(|&d| normalize_times(d, 0.0, &stats).0).collect();
        let expected = [-2.0 / s2, 0.0, 0.0, 2.0 / s2];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clipped_at_five_sigma() {
        let stats = TimeStats::from_samples(&[sample(vec![2.0, 4.0], vec![0.0, 2.0])]).unwrap();
        assert_eq!(normalize_times(1000.0, -1000.0, &stats), (CLIP, -CLIP));
    }
}
