use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the gap between consecutive keys is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightMode {
    /// Next press minus previous release; negative when keys overlap.
    #[default]
    ReleaseToPress,
    /// Next press minus previous press.
    PressToPress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeEvent {
    pub key_code: u32,
    pub ch: Option<char>,
    pub press_ms: f64,
    pub release_ms: f64,
}

impl KeystrokeEvent {
    /// The typed character, or a stand-in derived from the key code.
    ///
    /// Letter and digit codes map to their ASCII characters, 32 to a space,
    /// anything else to a private-use code point so every event still yields
    /// exactly one character.
    pub fn symbol(&self) -> char {
        if let Some(c) = self.ch {
            return c;
        }
        match self.key_code {
            65..=90 => char::from(self.key_code as u8 + 32),
            48..=57 | 32 => char::from(self.key_code as u8),
            code => char::from_u32(0xE000 + (code % 0x1000)).expect("private-use range"),
        }
    }
}

/// Hold (dwell) and flight times for a run of events.
///
/// `flight[0]` is 0 because the first key has no predecessor.
pub fn derive_times(events: &[KeystrokeEvent], mode: FlightMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut hold = Vec::with_capacity(events.len());
    let mut flight = Vec::with_capacity(events.len());
    for (j, e) in events.iter().enumerate() {
        if e.release_ms < e.press_ms {
            return Err(Error::MalformedEvent {
                index: j,
                press_ms: e.press_ms,
                release_ms: e.release_ms,
            });
        }
        hold.push(e.release_ms - e.press_ms);
        flight.push(match (j, mode) {
            (0, _) => 0.0,
            (_, FlightMode::ReleaseToPress) => e.press_ms - events[j - 1].release_ms,
            (_, FlightMode::PressToPress) => e.press_ms - events[j - 1].press_ms,
        });
    }
    Ok((hold, flight))
}

/// One typing session of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeSample {
    pub user_id: String,
    pub session_id: String,
    pub events: Vec<KeystrokeEvent>,
    pub hold_ms: Vec<f64>,
    pub flight_ms: Vec<f64>,
}

impl KeystrokeSample {
    pub fn from_events(
        user_id: impl Into<String>,
        session_id: impl Into<String>,
        events: Vec<KeystrokeEvent>,
        mode: FlightMode,
    ) -> Result<Self> {
        let (hold_ms, flight_ms) = derive_times(&events, mode)?;
        Ok(Self {
            user_id: user_id.into(),
            session_id: session_id.into(),
            events,
            hold_ms,
            flight_ms,
        })
    }

    /// Builds a sample from already-derived times, reconstructing
    /// release-to-press timestamps anchored so the earliest press is 0.
    pub fn from_precomputed(
        user_id: impl Into<String>,
        session_id: impl Into<String>,
        keys: Vec<(u32, Option<char>)>,
        hold_ms: Vec<f64>,
        flight_ms: Vec<f64>,
    ) -> Result<Self> {
        if keys.len() != hold_ms.len() || keys.len() != flight_ms.len() {
            return Err(Error::Config("key, hold and flight lengths differ".into()));
        }
        let mut events = Vec::with_capacity(keys.len());
        let mut prev_release = 0.0;
        for (j, ((key_code, ch), (&h, &f))) in keys.into_iter().zip(hold_ms.iter().zip(&flight_ms)).enumerate() {
            if h < 0.0 {
                return Err(Error::MalformedEvent {
                    index: j,
                    press_ms: 0.0,
                    release_ms: h,
                });
            }
            let press = if j == 0 { 0.0 } else { prev_release + f };
            prev_release = press + h;
            events.push(KeystrokeEvent {
                key_code,
                ch,
                press_ms: press,
                release_ms: press + h,
            });
        }
        let min_press = events.iter().map(|e| e.press_ms).fold(0.0, f64::min);
        if min_press < 0.0 {
            for e in &mut events {
                e.press_ms -= min_press;
                e.release_ms -= min_press;
            }
        }
        Ok(Self {
            user_id: user_id.into(),
            session_id: session_id.into(),
            events,
            hold_ms,
            flight_ms,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn symbols(&self) -> Vec<char> {
        self.events.iter().map(KeystrokeEvent::symbol).collect()
    }

    pub fn text(&self) -> String {
        self.symbols().into_iter().collect()
    }

    /// `(user_id, session_id)`, unique within a dataset.
    pub fn key(&self) -> (String, String) {
        (self.user_id.clone(), self.session_id.clone())
    }
}
