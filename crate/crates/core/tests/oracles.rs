//! Tape results against plain-loop reimplementations.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{jitter, random_sequence, random_tensor};
use tckd::autograd::{AttentionLayout, Tape};
use tckd::baselines::lstm::{self, InputMode, LstmConfig};
use tckd::encoder::{self, EncoderConfig, TemporalMode};
use tckd::tensor::ParameterSet;

const TOL: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` for row-major `W` of shape `[x.len(), out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
        .collect()
}

fn data<'a>(p: &'a ParameterSet<f64>, name: &str) -> &'a [f64] {
    &p.get(name).unwrap().data
}

fn gru_ref(p: &ParameterSet<f64>, dir: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hid = h.len();
    let g = |gate: &str, part: &str| data(p, &format!("{}gru.{dir}.{gate}.{part}", encoder::PREFIX));
    let pre = |gate: &str, hh: &[f64]| -> Vec<f64> {
        let a = affine(x, g(gate, "w"), Some(g(gate, "b")), hid);
        let u = affine(hh, g(gate, "u"), None, hid);
        a.iter().zip(&u).map(|(a, u)| a + u).collect()
    };
    let z: Vec<f64> = pre("z", h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = pre("r", h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
    let cand: Vec<f64> = pre("h", &rh).into_iter().map(f64::tanh).collect();
    (0..hid).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect()
}

fn encoder_setup(seed: u64, mode: TemporalMode) -> (EncoderConfig, ParameterSet<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        char_vocab: 12,
        embed_dim: 5,
        hidden: 4,
        temporal_mode: mode,
    };
    let mut p = ParameterSet::new();
    encoder::init_params(&cfg, &mut p, &mut rng);
    jitter(&mut p, &mut rng, 0.3);
    (cfg, p, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gru_step_matches_loop(seed in any::<u64>(), n in 1usize..5, bwd in any::<bool>()) {
        let (cfg, p, mut rng) = encoder_setup(seed, TemporalMode::Separate);
        let x = random_tensor(&mut rng, n, cfg.embed_dim, 1.0);
        let h = random_tensor(&mut rng, n, cfg.hidden, 1.0);
        let dir = if bwd { "bwd" } else { "fwd" };
        let mut tape = Tape::new();
        let (xv, hv) = (tape.leaf(x.clone()), tape.leaf(h.clone()));
        let out = encoder::gru_step(&mut tape, &p, dir, xv, hv).unwrap();
        for r in 0..n {
            let want = gru_ref(&p, dir, &x.data[r * cfg.embed_dim..][..cfg.embed_dim], &h.data[r * cfg.hidden..][..cfg.hidden]);
            for (a, b) in tape.value(out)[r * cfg.hidden..][..cfg.hidden].iter().zip(&want) {
                prop_assert!((a - b).abs() < TOL);
            }
        }
    }

    #[test]
    fn encoder_matches_recurrence(seed in any::<u64>(), shared in any::<bool>(), timing in any::<bool>()) {
        let mode = if shared { TemporalMode::Shared } else { TemporalMode::Separate };
        let (cfg, p, mut rng) = encoder_setup(seed, mode);
        let seq = random_sequence(&mut rng, 6, cfg.char_vocab, 5, false);
        let tokens: Vec<_> = seq.tokens.iter().collect();
        let mut tape = Tape::new();
        let out = encoder::encode_tokens(&mut tape, &p, &cfg, &tokens, timing).unwrap();
        let table = data(&p, &format!("{}char_embedding", encoder::PREFIX));
        let t_c = data(&p, &format!("{}temporal.t_c", encoder::PREFIX));
        let t_f = if shared { t_c } else { data(&p, &format!("{}temporal.t_f", encoder::PREFIX)) };
        let (e, hid) = (cfg.embed_dim, cfg.hidden);
        for (ti, tok) in seq.tokens.iter().enumerate() {
            let xs: Vec<Vec<f64>> = (0..tok.len())
                .map(|c| {
                    (0..e)
                        .map(|k| {
                            let base = table[tok.char_ids[c] * e + k];
                            if timing { base + tok.hold[c] * t_c[k] + tok.flight[c] * t_f[k] } else { base }
                        })
                        .collect()
                })
                .collect();
            let fwd = xs.iter().fold(vec![0.0; hid], |h, x| gru_ref(&p, "fwd", x, &h));
            let bwd = xs.iter().rev().fold(vec![0.0; hid], |h, x| gru_ref(&p, "bwd", x, &h));
            let got = &tape.value(out)[ti * 2 * hid..][..2 * hid];
            for (a, b) in got.iter().zip(fwd.iter().chain(&bwd)) {
                prop_assert!((a - b).abs() < TOL, "token {ti}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lstm_step_matches_loop(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LstmConfig { input_mode: InputMode::RawTemporal, input_width: 3, hidden: 4, layers: 1, num_users: 2 };
        let mut p = lstm::init_params::<f64>(&cfg, seed).unwrap();
        jitter(&mut p, &mut rng, 0.3);
        let x = random_tensor(&mut rng, n, 3, 1.0);
        let h = random_tensor(&mut rng, n, 4, 1.0);
        let c = random_tensor(&mut rng, n, 4, 1.0);
        let mut tape = Tape::new();
        let (xv, hv, cv) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
        let (h2, c2) = lstm::lstm_step(&mut tape, &p, 0, xv, hv, cv).unwrap();
        for r in 0..n {
            let (xr, hr, cr) = (&x.data[r * 3..][..3], &h.data[r * 4..][..4], &c.data[r * 4..][..4]);
            let gate = |g: &str| -> Vec<f64> {
                let w = data(&p, &format!("lstm.layer0.{g}.w"));
                let u = data(&p, &format!("lstm.layer0.{g}.u"));
                let b = data(&p, &format!("lstm.layer0.{g}.b"));
                affine(xr, w, Some(b), 4).iter().zip(affine(hr, u, None, 4)).map(|(a, b)| a + b).collect()
            };
            let (i, f, o, g) = (gate("i"), gate("f"), gate("o"), gate("g"));
            for j in 0..4 {
                let cn = sigmoid(f[j]) * cr[j] + sigmoid(i[j]) * g[j].tanh();
                let hn = sigmoid(o[j]) * cn.tanh();
                prop_assert!((tape.value(c2)[r * 4 + j] - cn).abs() < TOL);
                prop_assert!((tape.value(h2)[r * 4 + j] - hn).abs() < TOL);
            }
        }
    }

    #[test]
    fn attention_matches_per_head_loop(seed in any::<u64>(), heads in 1usize..4, dh in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.random_range(1..4);
        let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..5)).collect();
        let seq_len = *lengths.iter().max().unwrap();
        let width = heads * dh;
        let rows = batch * seq_len;
        let (q, k, v) = (random_tensor(&mut rng, rows, width, 2.0), random_tensor(&mut rng, rows, width, 2.0), random_tensor(&mut rng, rows, width, 2.0));
        let layout = AttentionLayout { batch, seq_len, heads, lengths: lengths.clone() };
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let out = tape.attention(qv, kv, vv, &layout).unwrap();
        let at = |t: &tckd::tensor::Tensor<f64>, row: usize, col: usize| t.data[row * width + col];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq_len {
                    for c in 0..dh {
                        let col = h * dh + c;
                        let want = if i >= lengths[b] {
                            0.0
                        } else {
                            let s: Vec<f64> = (0..lengths[b])
                                .map(|j| (0..dh).map(|d| at(&q, b * seq_len + i, h * dh + d) * at(&k, b * seq_len + j, h * dh + d)).sum::<f64>() / (dh as f64).sqrt())
                                .collect();
                            let z: f64 = s.iter().map(|x| x.exp()).sum();
                            s.iter().enumerate().map(|(j, x)| x.exp() / z * at(&v, b * seq_len + j, col)).sum()
                        };
                        let got = tape.value(out)[(b * seq_len + i) * width + col];
                        prop_assert!((got - want).abs() < TOL, "{got} vs {want}");
                    }
                }
            }
        }
    }
}
