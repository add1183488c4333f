//! Temporal-character encoder.
//!
//! Each character id is looked up in the character table `W_c`; with timing
//! enabled its (hold, flight) pair is embedded through the temporal matrix and
//! added to it. A bidirectional GRU then runs over the characters of every
//! token independently (state reset at token boundaries), and the token vector
//! is the forward GRU's final state concatenated with the backward GRU's final
//! state, i.e. the hidden states at the last and first characters.
//!
//! All tokens of a batch are processed together: step `j` of the recurrence
//! handles the `j`-th character of every token still running, and rows of
//! finished tokens are carried over unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::TokenUnit;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;

pub const PREFIX: &str = "tempchar_encoder.";

/// How hold and flight are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// One matrix for both: `u = T_c d + T_c f`, which only sees `d + f`.
    Shared,
    /// Separate matrices: `u = T_c d + T_f f`.
    #[default]
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub char_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub temporal_mode: TemporalMode,
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

fn name(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

const GATES: [&str; 3] = ["z", "r", "h"];
const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

pub fn init_params<S: Scalar, R: Rng>(cfg: &EncoderConfig, params: &mut ParameterSet<S>, rng: &mut R) {
    let (e, h) = (cfg.embed_dim, cfg.hidden);
    params.insert_normal(&name("char_embedding"), cfg.char_vocab, e, 0.02, rng);
    params.insert_xavier(&name("temporal.t_c"), 1, e, rng);
    if cfg.temporal_mode == TemporalMode::Separate {
        params.insert_xavier(&name("temporal.t_f"), 1, e, rng);
    }
    for dir in DIRECTIONS {
        for gate in GATES {
            params.insert_xavier(&name(&format!("gru.{dir}.{gate}.w")), e, h, rng);
            params.insert_xavier(&name(&format!("gru.{dir}.{gate}.u")), h, h, rng);
            params.insert_const(&name(&format!("gru.{dir}.{gate}.b")), vec![h], 0.0);
        }
    }
}

/// `e = W_c[c]` for every id: `[n, E]`.
pub fn char_embed<S: Scalar>(tape: &mut Tape<S>, params: &ParameterSet<S>, ids: &[usize]) -> Result<Var> {
    let table = tape.param(params, &name("char_embedding"))?;
    tape.embedding(table, ids)
}

/// Temporal embeddings `[n, E]` for normalized hold/flight values.
pub fn temporal_embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    mode: TemporalMode,
    hold: &[f64],
    flight: &[f64],
) -> Result<Var> {
    if hold.len() != flight.len() {
        return Err(Error::shape("temporal_embed", &[hold.len()], &[flight.len()]));
    }
    let n = hold.len();
    let d = tape.constant(vec![n, 1], hold.iter().map(|&v| S::of(v)).collect())?;
    let f = tape.constant(vec![n, 1], flight.iter().map(|&v| S::of(v)).collect())?;
    let t_c = tape.param(params, &name("temporal.t_c"))?;
    let t_f = match mode {
        TemporalMode::Shared => t_c,
        TemporalMode::Separate => tape.param(params, &name("temporal.t_f"))?,
    };
    let ud = tape.matmul(d, t_c)?;
    let uf = tape.matmul(f, t_f)?;
    tape.add(ud, uf)
}

/// Per-direction GRU weights bound on a tape.
struct GruWeights {
    u: [Var; 3],
}

/// Runs one GRU direction over token spans of `inputs` ([C, E], tokens laid
/// out consecutively with the given lengths) and returns the final state of
/// every token, `[T, H]`.
fn run_direction<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    dir: &str,
    inputs: Var,
    lengths: &[usize],
    hidden: usize,
) -> Result<Var> {
    let mut projected = [inputs; 3];
    let mut u = [inputs; 3];
    for (g, gate) in GATES.iter().enumerate() {
        let w = tape.param(params, &name(&format!("gru.{dir}.{gate}.w")))?;
        let b = tape.param(params, &name(&format!("gru.{dir}.{gate}.b")))?;
        projected[g] = tape.linear(inputs, w, b)?;
        u[g] = tape.param(params, &name(&format!("gru.{dir}.{gate}.u")))?;
    }
    let weights = GruWeights { u };
    let offsets: Vec<usize> = lengths
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let t = lengths.len();
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let mut h = tape.constant(vec![t, hidden], vec![S::zero(); t * hidden])?;
    for j in 0..longest {
        let idx: Vec<Option<usize>> = lengths
            .iter()
            .zip(&offsets)
            .map(|(&n, &o)| {
                (j < n).then(|| if dir == "fwd" { o + j } else { o + n - 1 - j })
            })
            .collect();
        let mask: Vec<bool> = idx.iter().map(Option::is_some).collect();
        let xs = [
            tape.gather_rows(projected[0], &idx)?,
            tape.gather_rows(projected[1], &idx)?,
            tape.gather_rows(projected[2], &idx)?,
        ];
        let next = gru_cell(tape, &weights, xs, h)?;
        h = if mask.iter().all(|&m| m) {
            next
        } else {
            tape.select_rows(&mask, next, h)?
        };
    }
    Ok(h)
}

/// `z = σ(xz + h U_z)`, `r = σ(xr + h U_r)`, `h̃ = tanh(xh + (r∘h) U_h)`,
/// `h' = h + z∘(h̃ − h)`. Input projections already include the biases.
fn gru_cell<S: Scalar>(tape: &mut Tape<S>, w: &GruWeights, xs: [Var; 3], h: Var) -> Result<Var> {
    let hz = tape.matmul(h, w.u[0])?;
    let pre_z = tape.add(xs[0], hz)?;
    let z = tape.sigmoid(pre_z)?;
    let hr = tape.matmul(h, w.u[1])?;
    let pre_r = tape.add(xs[1], hr)?;
    let r = tape.sigmoid(pre_r)?;
    let rh = tape.mul(r, h)?;
    let rhu = tape.matmul(rh, w.u[2])?;
    let pre_c = tape.add(xs[2], rhu)?;
    let cand = tape.tanh(pre_c)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// One GRU step of direction `dir` (`"fwd"` or `"bwd"`): `x` is `[n, E]`, `h` is `[n, H]`.
pub fn gru_step<S: Scalar>(tape: &mut Tape<S>, params: &ParameterSet<S>, dir: &str, x: Var, h: Var) -> Result<Var> {
    if !DIRECTIONS.contains(&dir) {
        return Err(Error::Config(format!("unknown GRU direction `{dir}`")));
    }
    let mut xs = [x; 3];
    let mut u = [x; 3];
    for (g, gate) in GATES.iter().enumerate() {
        let w = tape.param(params, &name(&format!("gru.{dir}.{gate}.w")))?;
        let b = tape.param(params, &name(&format!("gru.{dir}.{gate}.b")))?;
        xs[g] = tape.linear(x, w, b)?;
        u[g] = tape.param(params, &name(&format!("gru.{dir}.{gate}.u")))?;
    }
    gru_cell(tape, &GruWeights { u }, xs, h)
}

/// Bidirectional token summaries `[T, 2H]` for consecutive token spans of `inputs`.
pub fn bigru_token_embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    cfg: &EncoderConfig,
    inputs: Var,
    lengths: &[usize],
) -> Result<Var> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Empty("token with no characters".into()));
    }
    let rows = tape.shape(inputs).first().copied().unwrap_or(0);
    if rows != lengths.iter().sum::<usize>() {
        return Err(Error::shape("bigru_token_embed", tape.shape(inputs), lengths));
    }
    let fwd = run_direction(tape, params, "fwd", inputs, lengths, cfg.hidden)?;
    let bwd = run_direction(tape, params, "bwd", inputs, lengths, cfg.hidden)?;
    tape.concat(&[fwd, bwd])
}

/// The temporal-character encoder: token embeddings `[T, 2H]`.
///
/// With `use_temporal = false` the character embeddings enter the bi-GRU
/// unchanged; otherwise the temporal embedding of each keystroke is added.
pub fn encode_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    cfg: &EncoderConfig,
    tokens: &[&TokenUnit],
    use_temporal: bool,
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut hold = Vec::new();
    let mut flight = Vec::new();
    let mut lengths = Vec::with_capacity(tokens.len());
    for t in tokens {
        if use_temporal && (t.hold.len() != t.len() || t.flight.len() != t.len()) {
            return Err(Error::Config(format!(
                "token has {} chars but {} hold / {} flight values",
                t.len(),
                t.hold.len(),
                t.flight.len()
            )));
        }
        ids.extend_from_slice(&t.char_ids);
        hold.extend_from_slice(&t.hold);
        flight.extend_from_slice(&t.flight);
        lengths.push(t.len());
    }
    let e = char_embed(tape, params, &ids)?;
    let x = if use_temporal {
        let u = temporal_embed(tape, params, cfg.temporal_mode, &hold, &flight)?;
        tape.add(e, u)?
    } else {
        e
    };
    bigru_token_embed(tape, params, cfg, x, &lengths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: TemporalMode) -> EncoderConfig {
        EncoderConfig {
            char_vocab: 9,
            embed_dim: 4,
            hidden: 3,
            temporal_mode: mode,
        }
    }

    fn params(c: &EncoderConfig, seed: u64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        init_params(c, &mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    fn token(ids: &[usize], hold: &[f64], flight: &[f64]) -> TokenUnit {
        TokenUnit {
            subword_id: 3,
            char_ids: ids.to_vec(),
            hold: hold.to_vec(),
            flight: flight.to_vec(),
        }
    }

    #[test]
    fn identical_chars_identical_embeddings() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 1);
        let mut tape = Tape::new();
        let e = char_embed(&mut tape, &p, &[4, 5, 4]).unwrap();
        let v = tape.value(e);
        assert_eq!(v[0..4], v[8..12]);
        assert_ne!(v[0..4], v[4..8]);
    }

    #[test]
    fn changing_one_row_changes_only_that_char() {
        let c = cfg(TemporalMode::Separate);
        let mut p = params(&c, 1);
        let ids = [3, 4, 5];
        let before = {
            let mut t = Tape::new();
            let e = char_embed(&mut t, &p, &ids).unwrap();
            t.value(e).to_vec()
        };
        p.get_mut("tempchar_encoder.char_embedding").unwrap().data[4 * 4] += 1.0;
        let mut t = Tape::new();
        let e = char_embed(&mut t, &p, &ids).unwrap();
        let after = t.value(e);
        assert_eq!(before[0..4], after[0..4]);
        assert_ne!(before[4..8], after[4..8]);
        assert_eq!(before[8..12], after[8..12]);
    }

    #[test]
    fn out_of_range_char_rejected() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 1);
        let mut tape = Tape::new();
        assert!(char_embed(&mut tape, &p, &[9]).is_err());
    }

    #[test]
    fn zero_timing_gives_zero_temporal_embedding() {
        for mode in [TemporalMode::Shared, TemporalMode::Separate] {
            let c = cfg(mode);
            let p = params(&c, 2);
            let mut tape = Tape::new();
            let u = temporal_embed(&mut tape, &p, mode, &[0.0], &[0.0]).unwrap();
            assert!(tape.value(u).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shared_mode_sees_only_the_sum() {
        let c = cfg(TemporalMode::Shared);
        let p = params(&c, 3);
        let mut tape = Tape::new();
        let a = temporal_embed(&mut tape, &p, c.temporal_mode, &[1.0], &[2.0]).unwrap();
        let b = temporal_embed(&mut tape, &p, c.temporal_mode, &[2.0], &[1.0]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn separate_mode_distinguishes_hold_and_flight() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 3);
        let mut tape = Tape::new();
        let a = temporal_embed(&mut tape, &p, c.temporal_mode, &[1.0], &[2.0]).unwrap();
        let b = temporal_embed(&mut tape, &p, c.temporal_mode, &[2.0], &[1.0]).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn zero_weights_zero_output() {
        let c = cfg(TemporalMode::Separate);
        let mut p = params(&c, 4);
        for (_, t) in p.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 4]));
        let out = bigru_token_embed(&mut tape, &p, &c, x, &[3]).unwrap();
        assert_eq!(tape.shape(out), &[1, 6]);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_token_rejected() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(bigru_token_embed(&mut tape, &p, &c, x, &[2, 0]).is_err());
    }

    #[test]
    fn single_char_token_reads_same_vector_both_ways() {
        let c = cfg(TemporalMode::Separate);
        let mut p = params(&c, 5);
        // copy forward weights into backward ones: then both halves must agree
        let names: Vec<String> = p.names().filter(|n| n.contains(".fwd.")).cloned().collect();
        for n in names {
            let data = p.get(&n).unwrap().data.clone();
            p.get_mut(&n.replace(".fwd.", ".bwd.")).unwrap().data = data;
        }
        let mut tape = Tape::new();
        let out = encode_tokens(&mut tape, &p, &c, &[&token(&[6], &[0.4], &[-1.0])], true).unwrap();
        let v = tape.value(out);
        assert_eq!(v[0..3], v[3..6]);
    }

    #[test]
    fn missing_timing_rejected() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 5);
        let mut tape = Tape::new();
        let t = token(&[3, 4], &[0.1], &[0.2]);
        assert!(encode_tokens(&mut tape, &p, &c, &[&t], true).is_err());
        assert!(encode_tokens(&mut tape, &p, &c, &[&t], false).is_ok());
    }

    #[test]
    fn swapping_tokens_swaps_rows() {
        let c = cfg(TemporalMode::Separate);
        let p = params(&c, 6);
        let a = token(&[3, 4, 5], &[0.1, 0.2, 0.3], &[0.0, -0.5, 0.5]);
        let b = token(&[7, 8], &[1.0, -1.0], &[0.3, 0.3]);
        let mut tape = Tape::new();
        let ab = encode_tokens(&mut tape, &p, &c, &[&a, &b], true).unwrap();
        let ba = encode_tokens(&mut tape, &p, &c, &[&b, &a], true).unwrap();
        let (ab, ba) = (tape.value(ab), tape.value(ba));
        assert_eq!(ab[0..6], ba[6..12]);
        assert_eq!(ab[6..12], ba[0..6]);
    }
}
