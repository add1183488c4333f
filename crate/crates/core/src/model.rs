//! Dual-channel sequence model.
//!
//! A token channel (subword + position embeddings) and a temporal-character
//! channel (encoder output projected to the model width) each run through
//! their own pre-norm transformer block at every layer. After each layer a
//! heterogeneous interaction fuses the two streams into a shared
//! representation and adds channel-specific projections of it back to each
//! stream. The pooled embedding is the final `[CLS]` state of the token
//! channel; user logits are a linear head on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, Tape, Var};
use crate::data::{vocab, TokenizedSequence};
use crate::encoder::{self, EncoderConfig, TemporalMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;

pub const PREFIX: &str = "model.";
pub const LN_EPS: f64 = 1e-12;

/// Which inputs reach the character channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Characters only.
    CharOnly,
    /// Characters plus per-keystroke hold and flight times.
    #[default]
    TempChar,
}

impl Mode {
    pub fn uses_timing(self) -> bool {
        self == Mode::TempChar
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CharOnly => "char_only",
            Mode::TempChar => "temp_char",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char_only" => Ok(Mode::CharOnly),
            "temp_char" => Ok(Mode::TempChar),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub char_embed_dim: usize,
    /// Per-direction GRU width; token vectors from the encoder are twice this.
    pub char_hidden: usize,
    pub max_seq_len: usize,
    pub num_users: usize,
    pub subword_vocab: usize,
    pub char_vocab: usize,
    pub dropout: f64,
    pub mode: Mode,
    pub temporal_mode: TemporalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_size: 64,
            ffn_size: 256,
            char_embed_dim: 32,
            char_hidden: 64,
            max_seq_len: 128,
            num_users: 2,
            subword_vocab: 0,
            char_vocab: 0,
            dropout: 0.1,
            mode: Mode::TempChar,
            temporal_mode: TemporalMode::Separate,
        }
    }
}

impl ModelConfig {
    /// The 12-layer, 768-wide, 12-head configuration.
    pub fn base_scale() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_size: 768,
            ffn_size: 3072,
            char_embed_dim: 256,
            char_hidden: 384,
            max_seq_len: 512,
            ..Self::default()
        }
    }

    /// Copies user count and vocabulary sizes from a prepared split.
    pub fn fitted_to(self, split: &crate::data::DatasetSplit) -> Self {
        Self {
            num_users: split.num_users(),
            subword_vocab: split.vocab.subword_count(),
            char_vocab: split.vocab.char_count(),
            ..self
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            char_vocab: self.char_vocab,
            embed_dim: self.char_embed_dim,
            hidden: self.char_hidden,
            temporal_mode: self.temporal_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return fail("hidden_size must be divisible by num_heads");
        }
        if self.num_layers == 0 || self.hidden_size == 0 || self.ffn_size == 0 {
            return fail("num_layers, hidden_size and ffn_size must be positive");
        }
        if self.char_embed_dim == 0 || self.char_hidden == 0 {
            return fail("char_embed_dim and char_hidden must be positive");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive");
        }
        if self.num_users < 1 {
            return fail("num_users must be positive");
        }
        if self.subword_vocab <= vocab::NUM_SPECIALS || self.char_vocab <= vocab::NUM_SPECIALS {
            return fail("vocabulary sizes must exceed the special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, hidden]`
    pub pooled: Var,
    /// `[batch, num_users]`
    pub logits: Var,
    /// Batch positions whose sequences were cut to `max_seq_len`.
    pub truncated: Vec<usize>,
}

/// Padded packing of a batch: row `b * seq_len + i` holds token `i` of sample `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl BatchLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        let seq_len = lengths.iter().copied().max().unwrap_or(0);
        Self { lengths, seq_len }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.seq_len
    }

    fn attention(&self, heads: usize) -> AttentionLayout {
        AttentionLayout {
            batch: self.batch(),
            seq_len: self.seq_len,
            heads,
            lengths: self.lengths.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Token,
    Char,
}

impl Channel {
    fn tag(self) -> &'static str {
        match self {
            Channel::Token => "token",
            Channel::Char => "char",
        }
    }
}

fn pname(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TempCharModel<S> {
    pub config: ModelConfig,
    pub params: ParameterSet<S>,
}

impl<S: Scalar> TempCharModel<S> {
    /// Randomly initialised model: Xavier-uniform matrices, zero biases,
    /// N(0, 0.02) embedding tables, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        encoder::init_params(&config.encoder(), &mut p, &mut rng);
        let (d, f) = (config.hidden_size, config.ffn_size);
        let ln = |p: &mut ParameterSet<S>, base: &str| {
            p.insert_const(&pname(&format!("{base}.gamma")), vec![d], 1.0);
            p.insert_const(&pname(&format!("{base}.beta")), vec![d], 0.0);
        };
        p.insert_normal(&pname("token_embedding"), config.subword_vocab, d, 0.02, &mut rng);
        p.insert_normal(&pname("position_embedding"), config.max_seq_len, d, 0.02, &mut rng);
        ln(&mut p, "embed_ln");
        p.insert_xavier(&pname("char_proj.w"), 2 * config.char_hidden, d, &mut rng);
        p.insert_const(&pname("char_proj.b"), vec![d], 0.0);
        for l in 0..config.num_layers {
            for ch in [Channel::Token, Channel::Char] {
                let base = format!("layer{l}.{}", ch.tag());
                ln(&mut p, &format!("{base}.ln1"));
                ln(&mut p, &format!("{base}.ln2"));
                for m in ["q", "k", "v", "o"] {
                    p.insert_xavier(&pname(&format!("{base}.attn.w{m}")), d, d, &mut rng);
                    p.insert_const(&pname(&format!("{base}.attn.b{m}")), vec![d], 0.0);
                }
                p.insert_xavier(&pname(&format!("{base}.ffn.w1")), d, f, &mut rng);
                p.insert_const(&pname(&format!("{base}.ffn.b1")), vec![f], 0.0);
                p.insert_xavier(&pname(&format!("{base}.ffn.w2")), f, d, &mut rng);
                p.insert_const(&pname(&format!("{base}.ffn.b2")), vec![d], 0.0);
            }
            p.insert_xavier(&pname(&format!("layer{l}.interaction.fuse.w")), 2 * d, d, &mut rng);
            p.insert_const(&pname(&format!("layer{l}.interaction.fuse.b")), vec![d], 0.0);
            p.insert_xavier(&pname(&format!("layer{l}.interaction.split_token.w")), d, d, &mut rng);
            p.insert_xavier(&pname(&format!("layer{l}.interaction.split_char.w")), d, d, &mut rng);
        }
        ln(&mut p, "final_ln");
        p.insert_xavier(&pname("head.w"), d, config.num_users, &mut rng);
        p.insert_const(&pname("head.b"), vec![config.num_users], 0.0);
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored weights, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParameterSet<S>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if !template.params.same_layout(&params) {
            let missing = template
                .params
                .iter()
                .find(|(n, t)| params.get(n).map_or(true, |p| p.shape != t.shape))
                .map(|(n, _)| n.clone())
                .unwrap_or_else(|| "unexpected extra parameter".into());
            return Err(Error::Checkpoint(format!("weights do not match config at `{missing}`")));
        }
        Ok(Self { config, params })
    }

    fn dropout(&self, tape: &mut Tape<S>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) => tape.dropout(x, self.config.dropout, *r),
            None => Ok(x),
        }
    }

    fn layer_norm(&self, tape: &mut Tape<S>, x: Var, base: &str) -> Result<Var> {
        let g = tape.param(&self.params, &pname(&format!("{base}.gamma")))?;
        let b = tape.param(&self.params, &pname(&format!("{base}.beta")))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dense(&self, tape: &mut Tape<S>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = tape.param(&self.params, &pname(w))?;
        let b = tape.param(&self.params, &pname(b))?;
        tape.linear(x, w, b)
    }

    /// Subword plus position embeddings, layer-normed: `[rows, D]`.
    /// Padding rows use `[PAD]`.
    pub fn token_channel_embed(
        &self,
        tape: &mut Tape<S>,
        ids: &[Vec<usize>],
        layout: &BatchLayout,
    ) -> Result<Var> {
        if layout.seq_len > self.config.max_seq_len {
            return Err(Error::shape("token_channel_embed", &[layout.seq_len], &[self.config.max_seq_len]));
        }
        let mut flat = Vec::with_capacity(layout.rows());
        let mut pos = Vec::with_capacity(layout.rows());
        for seq in ids {
            for i in 0..layout.seq_len {
                flat.push(seq.get(i).copied().unwrap_or(vocab::PAD));
                pos.push(i);
            }
        }
        let table = tape.param(&self.params, &pname("token_embedding"))?;
        let tok = tape.embedding(table, &flat)?;
        let ptable = tape.param(&self.params, &pname("position_embedding"))?;
        let p = tape.embedding(ptable, &pos)?;
        let sum = tape.add(tok, p)?;
        self.layer_norm(tape, sum, "embed_ln")
    }

    /// Linear map from encoder width `2H` to `D`.
    pub fn project_char_channel(&self, tape: &mut Tape<S>, encoded: Var) -> Result<Var> {
        self.dense(tape, encoded, "char_proj.w", "char_proj.b")
    }

    /// Pre-norm block: `x + MHA(LN(x))`, then `+ FFN(LN(·))` with GELU.
    pub fn transformer_block(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        layer: usize,
        channel: Channel,
        layout: &BatchLayout,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let base = format!("layer{layer}.{}", channel.tag());
        let h = self.layer_norm(tape, x, &format!("{base}.ln1"))?;
        let q = self.dense(tape, h, &format!("{base}.attn.wq"), &format!("{base}.attn.bq"))?;
        let k = self.dense(tape, h, &format!("{base}.attn.wk"), &format!("{base}.attn.bk"))?;
        let v = self.dense(tape, h, &format!("{base}.attn.wv"), &format!("{base}.attn.bv"))?;
        let ctx = tape.attention(q, k, v, &layout.attention(self.config.num_heads))?;
        let att = self.dense(tape, ctx, &format!("{base}.attn.wo"), &format!("{base}.attn.bo"))?;
        let att = self.dropout(tape, att, &mut rng)?;
        let x = tape.add(x, att)?;
        let h = self.layer_norm(tape, x, &format!("{base}.ln2"))?;
        let h = self.dense(tape, h, &format!("{base}.ffn.w1"), &format!("{base}.ffn.b1"))?;
        let h = tape.gelu(h)?;
        let h = self.dense(tape, h, &format!("{base}.ffn.w2"), &format!("{base}.ffn.b2"))?;
        let h = self.dropout(tape, h, &mut rng)?;
        tape.add(x, h)
    }

    /// Fuse `s = GELU([token; char] W_f + b_f)`, then
    /// `token' = token + s W_t`, `char' = char + s W_c`.
    pub fn heterogeneous_interaction(
        &self,
        tape: &mut Tape<S>,
        layer: usize,
        token: Var,
        chars: Var,
    ) -> Result<(Var, Var)> {
        if tape.shape(token) != tape.shape(chars) {
            return Err(Error::shape("heterogeneous_interaction", tape.shape(token), tape.shape(chars)));
        }
        let base = format!("layer{layer}.interaction");
        let joint = tape.concat(&[token, chars])?;
        let fused = self.dense(tape, joint, &format!("{base}.fuse.w"), &format!("{base}.fuse.b"))?;
        let shared = tape.gelu(fused)?;
        let wt = tape.param(&self.params, &pname(&format!("{base}.split_token.w")))?;
        let wc = tape.param(&self.params, &pname(&format!("{base}.split_char.w")))?;
        let dt = tape.matmul(shared, wt)?;
        let dc = tape.matmul(shared, wc)?;
        Ok((tape.add(token, dt)?, tape.add(chars, dc)?))
    }

    fn clip_batch<'a>(&self, batch: &[&'a TokenizedSequence]) -> (Vec<&'a [crate::data::TokenUnit]>, Vec<usize>) {
        let mut truncated = Vec::new();
        let seqs = batch
            .iter()
            .enumerate()
            .map(|(b, s)| {
                if s.tokens.len() > self.config.max_seq_len {
                    log::warn!(
                        "sequence {}/{} has {} tokens, truncated to {}",
                        s.user_id,
                        s.session_id,
                        s.tokens.len(),
                        self.config.max_seq_len
                    );
                    truncated.push(b);
                    &s.tokens[..self.config.max_seq_len]
                } else {
                    &s.tokens[..]
                }
            })
            .collect();
        (seqs, truncated)
    }

    /// Encoder token embeddings `[T, 2H]` for every token of the batch, in
    /// batch-then-position order. Timing is used iff the model mode asks for it.
    pub fn encode(&self, tape: &mut Tape<S>, batch: &[&TokenizedSequence]) -> Result<Var> {
        let (seqs, _) = self.clip_batch(batch);
        let tokens: Vec<&crate::data::TokenUnit> = seqs.iter().flat_map(|s| s.iter()).collect();
        encoder::encode_tokens(tape, &self.params, &self.config.encoder(), &tokens, self.config.mode.uses_timing())
    }

    /// Batched forward pass. Pass an RNG to enable dropout (training).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: &[&TokenizedSequence],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("forward batch".into()));
        }
        let (seqs, truncated) = self.clip_batch(batch);
        if let Some(bad) = seqs.iter().flat_map(|s| s.iter()).find(|t| t.subword_id >= self.config.subword_vocab) {
            return Err(Error::Checkpoint(format!(
                "subword id {} outside model vocabulary of {}",
                bad.subword_id, self.config.subword_vocab
            )));
        }
        let layout = BatchLayout::new(seqs.iter().map(|s| s.len()).collect());
        if layout.lengths.contains(&0) {
            return Err(Error::Empty("sequence without tokens".into()));
        }

        let tokens: Vec<&crate::data::TokenUnit> = seqs.iter().flat_map(|s| s.iter()).collect();
        let enc = encoder::encode_tokens(tape, &self.params, &self.config.encoder(), &tokens, self.config.mode.uses_timing())?;
        let chars = self.project_char_channel(tape, enc)?;
        let mut idx = Vec::with_capacity(layout.rows());
        let mut offset = 0;
        for &len in &layout.lengths {
            idx.extend((0..layout.seq_len).map(|i| (i < len).then_some(offset + i)));
            offset += len;
        }
        let chars = tape.gather_rows(chars, &idx)?;
        let mut chars = self.dropout(tape, chars, &mut rng)?;

        let ids: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|t| t.subword_id).collect()).collect();
        let tok = self.token_channel_embed(tape, &ids, &layout)?;
        let mut tok = self.dropout(tape, tok, &mut rng)?;

        for l in 0..self.config.num_layers {
            tok = self.transformer_block(tape, tok, l, Channel::Token, &layout, rng.as_deref_mut())?;
            chars = self.transformer_block(tape, chars, l, Channel::Char, &layout, rng.as_deref_mut())?;
            (tok, chars) = self.heterogeneous_interaction(tape, l, tok, chars)?;
        }
        let cls: Vec<Option<usize>> = (0..layout.batch()).map(|b| Some(b * layout.seq_len)).collect();
        let cls = tape.gather_rows(tok, &cls)?;
        let pooled = self.layer_norm(tape, cls, "final_ln")?;
        let logits = self.dense(tape, pooled, "head.w", "head.b")?;
        Ok(ForwardOutput {
            pooled,
            logits,
            truncated,
        })
    }
}
