use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::events::KeystrokeSample;
use crate::error::{Error, Result};

/// Number of held-out samples for a user with `count` samples.
pub fn test_count(count: usize, test_ratio: f64) -> usize {
    let raw = (test_ratio * count as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(count.saturating_sub(1))
}

/// Per-user stratified split. Users are visited in lexicographic order and
/// each user's samples are shuffled by one seeded stream, so the result
/// depends only on the sample set and `seed`.
pub fn split_samples(
    samples: &[KeystrokeSample],
    test_ratio: f64,
    seed: u64,
) -> Result<(Vec<KeystrokeSample>, Vec<KeystrokeSample>)> {
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::Config(format!("test_ratio {test_ratio} outside [0, 1)")));
    }
    if samples.is_empty() {
        return Err(Error::Empty("no samples to split".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&KeystrokeSample>> = BTreeMap::new();
    for s in samples {
        by_user.entry(&s.user_id).or_default().push(s);
    }
    if let Some((user, _)) = by_user.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::TooFewSamples(user.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut group) in by_user {
        group.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        group.shuffle(&mut rng);
        let k = test_count(group.len(), test_ratio);
        test.extend(group[..k].iter().map(|s| (*s).clone()));
        train.extend(group[k..].iter().map(|s| (*s).clone()));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(user: &str, n: usize) -> Vec<KeystrokeSample> {
        (0..n)
            .map(|i| {
                KeystrokeSample::from_precomputed(user, format!("s{i:02}"), vec![(65, Some('a'))], vec![90.0], vec![0.0]).unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_samples_two_test() {
        let (train, test) = split_samples(&samples("u", 10), 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn four_samples_one_test() {
        let (train, test) = split_samples(&samples("u", 4), 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (3, 1));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let mut all = samples("a", 7);
        all.extend(samples("b", 13));
        let a = split_samples(&all, 0.2, 99).unwrap();
        let b = split_samples(&all, 0.2, 99).unwrap();
        assert_eq!(a, b);
        for t in &a.1 {
            assert!(!a.0.iter().any(|s| s.key() == t.key()));
        }
        assert_eq!(a.0.len() + a.1.len(), all.len());
    }

    #[test]
    fn lone_sample_user_named_in_error() {
        let mut all = samples("a", 5);
        all.extend(samples("solo", 1));
        match split_samples(&all, 0.2, 0) {
            Err(Error::TooFewSamples(u)) => assert_eq!(u, "solo"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
