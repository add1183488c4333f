//! LSTM sequence classifier over raw keystroke features or frozen encoder
//! token embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::TokenizedSequence;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::TempCharModel;
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;
use crate::train::Network;

pub const PREFIX: &str = "lstm.";
const GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// One step per keystroke: one-hot character ∥ hold ∥ flight.
    RawTemporal,
    /// One step per token: encoder output with timing switched off.
    CharbertEmbed,
    /// One step per token: encoder output with timing.
    TempcharEmbed,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::RawTemporal => "raw_temporal",
            InputMode::CharbertEmbed => "charbert_embed",
            InputMode::TempcharEmbed => "tempchar_embed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_mode: InputMode,
    pub input_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_users: usize,
}

fn pname(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

pub fn init_params<S: Scalar>(cfg: &LstmConfig, seed: u64) -> Result<ParameterSet<S>> {
    if cfg.input_width == 0 || cfg.hidden == 0 || cfg.layers == 0 || cfg.num_users == 0 {
        return Err(Error::Config("LSTM sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for l in 0..cfg.layers {
        let fan_in = if l == 0 { cfg.input_width } else { cfg.hidden };
        for g in GATES {
            p.insert_xavier(&pname(&format!("layer{l}.{g}.w")), fan_in, cfg.hidden, &mut rng);
            p.insert_xavier(&pname(&format!("layer{l}.{g}.u")), cfg.hidden, cfg.hidden, &mut rng);
            p.insert_const(&pname(&format!("layer{l}.{g}.b")), vec![cfg.hidden], 0.0);
        }
    }
    p.insert_xavier(&pname("head.w"), cfg.hidden, cfg.num_users, &mut rng);
    p.insert_const(&pname("head.b"), vec![cfg.num_users], 0.0);
    Ok(p)
}

/// One LSTM step of layer `layer`: returns `(h', c')`.
///
/// `i, f, o = σ(x W + h U + b)`, `g = tanh(x W_g + h U_g + b_g)`,
/// `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
pub fn lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    layer: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let mut gates = [x; 4];
    for (k, g) in GATES.iter().enumerate() {
        let w = tape.param(params, &pname(&format!("layer{layer}.{g}.w")))?;
        let u = tape.param(params, &pname(&format!("layer{layer}.{g}.u")))?;
        let b = tape.param(params, &pname(&format!("layer{layer}.{g}.b")))?;
        let xw = tape.linear(x, w, b)?;
        let hu = tape.matmul(h, u)?;
        let pre = tape.add(xw, hu)?;
        gates[k] = if k == 3 { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
    }
    let [i, f, o, g] = gates;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs the stacked LSTM over variable-length step sequences and returns
/// `(final top-layer hidden [B, H], logits [B, U])`.
pub fn lstm_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    cfg: &LstmConfig,
    steps: &[Vec<Vec<f64>>],
) -> Result<(Var, Var)> {
    if steps.is_empty() {
        return Err(Error::Empty("LSTM batch".into()));
    }
    if steps.iter().any(Vec::is_empty) {
        return Err(Error::Empty("LSTM sequence without steps".into()));
    }
    if let Some(bad) = steps.iter().flatten().find(|v| v.len() != cfg.input_width) {
        return Err(Error::shape("lstm_forward", &[bad.len()], &[cfg.input_width]));
    }
    let b = steps.len();
    let longest = steps.iter().map(Vec::len).max().unwrap_or(0);
    let zeros = || vec![S::zero(); b * cfg.hidden];
    let mut state: Vec<(Var, Var)> = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let h = tape.constant(vec![b, cfg.hidden], zeros())?;
        let c = tape.constant(vec![b, cfg.hidden], zeros())?;
        state.push((h, c));
    }
    for j in 0..longest {
        let mask: Vec<bool> = steps.iter().map(|s| j < s.len()).collect();
        let mut data = Vec::with_capacity(b * cfg.input_width);
        for s in steps {
            match s.get(j) {
                Some(v) => data.extend(v.iter().map(|&x| S::of(x))),
                None => data.extend(std::iter::repeat_n(S::zero(), cfg.input_width)),
            }
        }
        let mut x = tape.constant(vec![b, cfg.input_width], data)?;
        for (l, st) in state.iter_mut().enumerate() {
            let (h, c) = lstm_step(tape, params, l, x, st.0, st.1)?;
            *st = if mask.iter().all(|&m| m) {
                (h, c)
            } else {
                (tape.select_rows(&mask, h, st.0)?, tape.select_rows(&mask, c, st.1)?)
            };
            x = st.0;
        }
    }
    let top = state[cfg.layers - 1].0;
    let w = tape.param(params, &pname("head.w"))?;
    let hb = tape.param(params, &pname("head.b"))?;
    let logits = tape.linear(top, w, hb)?;
    Ok((top, logits))
}

/// Encoder weights lifted out of a trained model and kept fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder<S> {
    pub config: EncoderConfig,
    pub params: ParameterSet<S>,
    pub use_temporal: bool,
}

impl<S: Scalar> FrozenEncoder<S> {
    pub fn from_model(model: &TempCharModel<S>, use_temporal: bool) -> Self {
        let mut params = ParameterSet::new();
        for (n, t) in model.params.iter().filter(|(n, _)| n.starts_with(encoder::PREFIX)) {
            let mut t = t.clone();
            t.grad = None;
            params.insert(n.clone(), t);
        }
        for (_, t) in params.iter_mut() {
            t.requires_grad = false;
        }
        Self {
            config: model.config.encoder(),
            params,
            use_temporal,
        }
    }

    /// Token vectors `[tokens][2H]` of one sequence, `[CLS]` included.
    pub fn embed(&self, seq: &TokenizedSequence) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let tokens: Vec<_> = seq.tokens.iter().collect();
        let out = encoder::encode_tokens(&mut tape, &self.params, &self.config, &tokens, self.use_temporal)?;
        let w = self.config.output_dim();
        Ok(tape.value(out).chunks(w).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepSource<S> {
    Raw { char_vocab: usize },
    Encoder(FrozenEncoder<S>),
}

impl<S: Scalar> StepSource<S> {
    pub fn width(&self) -> usize {
        match self {
            StepSource::Raw { char_vocab } => char_vocab + 2,
            StepSource::Encoder(e) => e.config.output_dim(),
        }
    }

    pub fn steps(&self, seq: &TokenizedSequence) -> Result<Vec<Vec<f64>>> {
        match self {
            StepSource::Raw { char_vocab } => {
                let mut out = Vec::new();
                for t in seq.tokens.iter().skip(1) {
                    for (k, &c) in t.char_ids.iter().enumerate() {
                        if c >= *char_vocab {
                            return Err(Error::OutOfRange {
                                what: "character vocabulary",
                                index: c,
                                len: *char_vocab,
                            });
                        }
                        let mut v = vec![0.0; char_vocab + 2];
                        v[c] = 1.0;
                        v[*char_vocab] = t.hold.get(k).copied().unwrap_or(0.0);
                        v[char_vocab + 1] = t.flight.get(k).copied().unwrap_or(0.0);
                        out.push(v);
                    }
                }
                Ok(out)
            }
            StepSource::Encoder(e) => e.embed(seq),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmClassifier<S> {
    pub config: LstmConfig,
    pub params: ParameterSet<S>,
    pub source: StepSource<S>,
}

impl<S: Scalar> LstmClassifier<S> {
    pub fn new(source: StepSource<S>, hidden: usize, layers: usize, num_users: usize, seed: u64) -> Result<Self> {
        let input_mode = match &source {
            StepSource::Raw { .. } => InputMode::RawTemporal,
            StepSource::Encoder(e) if e.use_temporal => InputMode::TempcharEmbed,
            StepSource::Encoder(_) => InputMode::CharbertEmbed,
        };
        let config = LstmConfig {
            input_mode,
            input_width: source.width(),
            hidden,
            layers,
            num_users,
        };
        Ok(Self {
            params: init_params(&config, seed)?,
            config,
            source,
        })
    }
}

impl<S: Scalar> Network<S> for LstmClassifier<S> {
    fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet<S> {
        &mut self.params
    }

    fn forward_batch(
        &self,
        tape: &mut Tape<S>,
        batch: &[&TokenizedSequence],
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let steps: Vec<Vec<Vec<f64>>> = batch.iter().map(|s| self.source.steps(s)).collect::<Result<_>>()?;
        lstm_forward(tape, &self.params, &self.config, &steps)
    }
}
