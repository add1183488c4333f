//! Reading and writing the two keystroke CSV schemas.
//!
//! Precomputed: `user_id,key_code,hold_ms,flight_ms,char`.
//! Timestamps: `user_id,key_code,press_ms,release_ms,char`.
//! Either may carry an extra `session_id` column; when it is present samples
//! are grouped by `(user_id, session_id)`, otherwise a blank line or a change
//! of `user_id` starts a new session.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{FlightMode, KeystrokeEvent, KeystrokeSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Timestamps,
    #[default]
    Precomputed,
}

impl DataFormat {
    fn time_columns(self) -> [&'static str; 2] {
        match self {
            DataFormat::Timestamps => ["press_ms", "release_ms"],
            DataFormat::Precomputed => ["hold_ms", "flight_ms"],
        }
    }
}

struct Columns {
    user: usize,
    session: Option<usize>,
    key: usize,
    t0: usize,
    t1: usize,
    ch: usize,
    width: usize,
}

fn resolve_columns(header: &[String], format: DataFormat) -> Result<Columns> {
    let [a, b] = format.time_columns();
    let find = |name: &str| header.iter().position(|h| h == name);
    let known = ["user_id", "session_id", "key_code", a, b, "char"];
    let all_known = header.iter().all(|h| known.contains(&h.as_str()));
    match (find("user_id"), find("key_code"), find(a), find(b), find("char")) {
        (Some(user), Some(key), Some(t0), Some(t1), Some(ch)) if all_known => Ok(Columns {
            user,
            session: find("session_id"),
            key,
            t0,
            t1,
            ch,
            width: header.len(),
        }),
        _ => Err(Error::UnknownSchema(header.join(","))),
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    match rdr.records().next() {
        Some(rec) => Ok(rec
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect()),
        None => Ok(Vec::new()),
    }
}

fn parse_char(field: &str, lineno: usize) -> Result<Option<char>> {
    let bad = || Error::Parse {
        line: lineno,
        msg: format!("bad char field `{field}`"),
    };
    let mut it = field.chars();
    match (it.next(), it.next()) {
        (None, _) => Ok(None),
        (Some(c), None) => Ok(Some(c)),
        _ => {
            let hex = field.strip_prefix("U+").ok_or_else(bad)?;
            let code = u32::from_str_radix(hex, 16).map_err(|_| bad())?;
            char::from_u32(code).map(Some).ok_or_else(bad)
        }
    }
}

fn format_char(ch: Option<char>) -> String {
    match ch {
        None => String::new(),
        Some(c) if c.is_control() => format!("U+{:04X}", c as u32),
        Some(c) => c.to_string(),
    }
}

fn parse_num(field: &str, lineno: usize, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("non-numeric {what} `{field}`"),
        })
}

struct Group {
    user: String,
    session: String,
    keys: Vec<(u32, Option<char>)>,
    t0: Vec<f64>,
    t1: Vec<f64>,
}

/// Parses CSV text in the given schema.
pub fn parse_str(text: &str, format: DataFormat, flight_mode: FlightMode) -> Result<Vec<KeystrokeSample>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header_line) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Empty("dataset file".into()))?;
    let header: Vec<String> = parse_record(header_line, 1)?.into_iter().map(|h| h.trim().to_string()).collect();
    let cols = resolve_columns(&header, format)?;

    let mut groups: Vec<Group> = Vec::new();
    let mut by_key: HashMap<(String, String), usize> = HashMap::new();
    let mut session_counter: HashMap<String, usize> = HashMap::new();
    let mut current: Option<usize> = None;

    for (lineno, line) in lines {
        if line.trim().is_empty() {
            current = None;
            continue;
        }
        let rec = parse_record(line, lineno)?;
        if rec.len() != cols.width {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", cols.width, rec.len()),
            });
        }
        let user = rec[cols.user].clone();
        let key_code = rec[cols.key].trim().parse::<u32>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("non-numeric key_code `{}`", rec[cols.key]),
        })?;
        let t0 = parse_num(&rec[cols.t0], lineno, format.time_columns()[0])?;
        let t1 = parse_num(&rec[cols.t1], lineno, format.time_columns()[1])?;
        let ch = parse_char(&rec[cols.ch], lineno)?;

        let idx = match cols.session {
            Some(sc) => {
                let key = (user.clone(), rec[sc].clone());
                *by_key.entry(key.clone()).or_insert_with(|| {
                    groups.push(Group {
                        user: key.0,
                        session: key.1,
                        keys: Vec::new(),
                        t0: Vec::new(),
                        t1: Vec::new(),
                    });
                    groups.len() - 1
                })
            }
            None => match current {
                Some(i) if groups[i].user == user => i,
                _ => {
                    let n = session_counter.entry(user.clone()).or_insert(0);
                    groups.push(Group {
                        user: user.clone(),
                        session: n.to_string(),
                        keys: Vec::new(),
                        t0: Vec::new(),
                        t1: Vec::new(),
                    });
                    *n += 1;
                    current = Some(groups.len() - 1);
                    groups.len() - 1
                }
            },
        };
        let g = &mut groups[idx];
        g.keys.push((key_code, ch));
        g.t0.push(t0);
        g.t1.push(t1);
    }
    if groups.is_empty() {
        return Err(Error::Empty("dataset has a header but no rows".into()));
    }
    groups
        .into_iter()
        .map(|g| match format {
            DataFormat::Precomputed => KeystrokeSample::from_precomputed(g.user, g.session, g.keys, g.t0, g.t1),
            DataFormat::Timestamps => {
                let events = g
                    .keys
                    .into_iter()
                    .zip(g.t0.into_iter().zip(g.t1))
                    .map(|((key_code, ch), (press_ms, release_ms))| KeystrokeEvent {
                        key_code,
                        ch,
                        press_ms,
                        release_ms,
                    })
                    .collect();
                KeystrokeSample::from_events(g.user, g.session, events, flight_mode)
            }
        })
        .collect()
}

pub fn parse_dataset(path: &Path, format: DataFormat, flight_mode: FlightMode) -> Result<Vec<KeystrokeSample>> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text, format, flight_mode)
}

/// Serialises samples with an explicit `session_id` column.
pub fn write_str(samples: &[KeystrokeSample], format: DataFormat) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let [a, b] = format.time_columns();
    w.write_record(["user_id", "session_id", "key_code", a, b, "char"])?;
    for s in samples {
        for (j, e) in s.events.iter().enumerate() {
            let (t0, t1) = match format {
                DataFormat::Precomputed => (s.hold_ms[j], s.flight_ms[j]),
                DataFormat::Timestamps => (e.press_ms, e.release_ms),
            };
            w.write_record([
                s.user_id.clone(),
                s.session_id.clone(),
                e.key_code.to_string(),
                t0.to_string(),
                t1.to_string(),
                format_char(e.ch),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_dataset(path: &Path, samples: &[KeystrokeSample], format: DataFormat) -> Result<()> {
    std::fs::write(path, write_str(samples, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precomputed_row_maps_fields() {
        let text = "user_id,key_code,hold_ms,flight_ms,char\nu07,65,120,35,a\n";
        let s = parse_str(text, DataFormat::Precomputed, FlightMode::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].user_id, "u07");
        assert_eq!(s[0].events[0].key_code, 65);
        assert_eq!(s[0].events[0].ch, Some('a'));
        assert_eq!(s[0].hold_ms, vec![120.0]);
        assert_eq!(s[0].flight_ms, vec![35.0]);
    }

    #[test]
    fn two_users_two_groups() {
        let text = "user_id,key_code,hold_ms,flight_ms,char\nu1,65,100,0,a\nu1,66,90,20,b\nu2,65,80,0,a\n";
        let s = parse_str(text, DataFormat::Precomputed, FlightMode::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].len(), 2);
        assert_eq!(s[1].user_id, "u2");
    }

    #[test]
    fn blank_line_separates_sessions() {
        let text = "user_id,key_code,hold_ms,flight_ms,char\nu1,65,100,0,a\n\nu1,66,90,0,b\n";
        let s = parse_str(text, DataFormat::Precomputed, FlightMode::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].session_id.as_str(), s[1].session_id.as_str()), ("0", "1"));
    }

    #[test]
    fn session_column_groups_interleaved_rows() {
        let text = "user_id,session_id,key_code,hold_ms,flight_ms,char\nu1,a,65,100,0,a\nu1,b,66,90,0,b\nu1,a,67,95,10,c\n";
        let s = parse_str(text, DataFormat::Precomputed, FlightMode::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text(), "ac");
    }

    #[test]
    fn schema_errors() {
        let fm = FlightMode::default();
        assert!(matches!(parse_str("", DataFormat::Precomputed, fm), Err(Error::Empty(_))));
        assert!(matches!(
            parse_str("a,b,c\n1,2,3\n", DataFormat::Precomputed, fm),
            Err(Error::UnknownSchema(_))
        ));
        assert!(matches!(
            parse_str("user_id,key_code,press_ms,release_ms,char\nu,65,0,10,a\n", DataFormat::Precomputed, fm),
            Err(Error::UnknownSchema(_))
        ));
        assert!(matches!(
            parse_str("user_id,key_code,hold_ms,flight_ms,char\nu,65,abc,10,a\n", DataFormat::Precomputed, fm),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn timestamps_match_precomputed_fixture() {
        // presses/releases chosen by hand; hold = r - p, flight = p - r_prev
        let ts = "user_id,key_code,press_ms,release_ms,char\n\
                  u1,72,0,95,h\n\
                  u1,69,140,230,e\n\
                  u1,76,210,300,l\n\
                  u1,76,360,445,l\n\
                  u1,79,505,610,o\n";
        let pre = "user_id,key_code,hold_ms,flight_ms,char\n\
                   u1,72,95,0,h\n\
                   u1,69,90,45,e\n\
                   u1,76,90,-20,l\n\
                   u1,76,85,60,l\n\
                   u1,79,105,60,o\n";
        let a = parse_str(ts, DataFormat::Timestamps, FlightMode::ReleaseToPress).unwrap();
        let b = parse_str(pre, DataFormat::Precomputed, FlightMode::ReleaseToPress).unwrap();
        assert_eq!(a[0].hold_ms, b[0].hold_ms);
        assert_eq!(a[0].flight_ms, b[0].flight_ms);
    }

    #[test]
    fn special_chars_survive_writing() {
        let keys = vec![(188, Some(',')), (222, Some('"')), (13, Some('\n')), (32, Some(' ')), (16, None)];
        let s = KeystrokeSample::from_precomputed("u,1", "0", keys, vec![1.0; 5], vec![0.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        for format in [DataFormat::Precomputed, DataFormat::Timestamps] {
            let text = write_str(std::slice::from_ref(&s), format).unwrap();
            let back = parse_str(&text, format, FlightMode::ReleaseToPress).unwrap();
            assert_eq!(back, vec![s.clone()]);
        }
    }
}
