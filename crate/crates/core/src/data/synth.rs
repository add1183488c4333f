//! Seeded synthetic typing corpora with per-user timing profiles.
//!
//! Every user types phrases drawn from the same pool, so only timing tells
//! users apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::events::{FlightMode, KeystrokeEvent, KeystrokeSample};
use crate::error::{Error, Result};

pub const HOLD_RANGE: (f64, f64) = (60.0, 200.0);
pub const FLIGHT_RANGE: (f64, f64) = (20.0, 180.0);
pub const JITTER_RANGE: (f64, f64) = (5.0, 25.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharClass {
    Vowel,
    Consonant,
    Space,
    Other,
}

pub const NUM_CLASSES: usize = 4;

impl CharClass {
    pub fn of(c: char) -> Self {
        let l = c.to_ascii_lowercase();
        if c.is_whitespace() {
            CharClass::Space
        } else if "aeiou".contains(l) {
            CharClass::Vowel
        } else if l.is_ascii_alphabetic() {
            CharClass::Consonant
        } else {
            CharClass::Other
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Timing profile of one synthetic typist, indexed by [`CharClass`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub hold_mean: [f64; NUM_CLASSES],
    pub flight_mean: [f64; NUM_CLASSES],
    pub jitter: f64,
}

impl UserProfile {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        let hold_mean = [(); NUM_CLASSES].map(|_| draw(HOLD_RANGE));
        let flight_mean = [(); NUM_CLASSES].map(|_| draw(FLIGHT_RANGE));
        let jitter = draw(JITTER_RANGE);
        Self {
            hold_mean,
            flight_mean,
            jitter,
        }
    }

    /// Same hold and flight mean for every class.
    pub fn uniform(hold: f64, flight: f64, jitter: f64) -> Self {
        Self {
            hold_mean: [hold; NUM_CLASSES],
            flight_mean: [flight; NUM_CLASSES],
            jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub samples_per_user: usize,
    pub phrase_pool: Vec<String>,
    pub seed: u64,
}

pub fn default_phrase_pool() -> Vec<String> {
    [
        "the quick brown fox jumps over the lazy dog",
        "please send the report before the meeting",
        "my password is not the name of my cat",
        "we will meet at the station at noon",
        "open the door and let the light in",
        "she reads the news every morning",
        "the weather is nice for a long walk",
        "call me when you get home tonight",
        "the server restarted after the update",
        "coffee first then we can talk about it",
        "a small step for the team today",
        "keep the notes in the shared folder",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// The seed-pinned 8-user benchmark used by the experiments.
pub fn standard_benchmark() -> SynthConfig {
    SynthConfig {
        num_users: 8,
        samples_per_user: 100,
        phrase_pool: default_phrase_pool(),
        seed: 20240611,
    }
}

fn key_code(c: char) -> u32 {
    if c.is_ascii_alphabetic() {
        c.to_ascii_uppercase() as u32
    } else {
        c as u32
    }
}

/// Generates `samples_per_user` sessions for each profile. User `i` is named `u{i:03}`.
pub fn generate_from_profiles(
    profiles: &[UserProfile],
    samples_per_user: usize,
    phrase_pool: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<KeystrokeSample>> {
    if phrase_pool.iter().all(|p| p.is_empty()) {
        return Err(Error::Empty("phrase pool".into()));
    }
    let pool: Vec<&String> = phrase_pool.iter().filter(|p| !p.is_empty()).collect();
    let mut out = Vec::with_capacity(profiles.len() * samples_per_user);
    for (u, profile) in profiles.iter().enumerate() {
        let noise = Normal::new(0.0, profile.jitter).map_err(|e| Error::Config(e.to_string()))?;
        for s in 0..samples_per_user {
            let phrase = pool[rng.random_range(0..pool.len())];
            let mut events = Vec::with_capacity(phrase.len());
            let mut prev_release = 0.0;
            for (j, c) in phrase.chars().enumerate() {
                let k = CharClass::of(c).index();
                let hold = (profile.hold_mean[k] + noise.sample(rng)).round().max(1.0);
                let flight = (profile.flight_mean[k] + noise.sample(rng)).round().max(1.0);
                let press = if j == 0 { 0.0 } else { prev_release + flight };
                prev_release = press + hold;
                events.push(KeystrokeEvent {
                    key_code: key_code(c),
                    ch: Some(c),
                    press_ms: press,
                    release_ms: press + hold,
                });
            }
            out.push(KeystrokeSample::from_events(
                format!("u{u:03}"),
                format!("s{s:03}"),
                events,
                FlightMode::ReleaseToPress,
            )?);
        }
    }
    Ok(out)
}

pub fn synth_generate(config: &SynthConfig) -> Result<Vec<KeystrokeSample>> {
    if config.num_users < 2 {
        return Err(Error::Config("num_users must be at least 2".into()));
    }
    if config.phrase_pool.iter().all(|p| p.is_empty()) {
        return Err(Error::Empty("phrase pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profiles: Vec<UserProfile> = (0..config.num_users).map(|_| UserProfile::random(&mut rng)).collect();
    generate_from_profiles(&profiles, config.samples_per_user, &config.phrase_pool, &mut rng)
}
