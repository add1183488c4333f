//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tckd::autograd::{Tape, Var};
use tckd::data::{TokenUnit, TokenizedSequence};
use tckd::tensor::{ParameterSet, Tensor};

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than `GRAD_FLOOR * max(1, |loss|)` are compared on an
/// absolute scale: below that the central difference is roundoff, and
/// gradients that are exactly zero (e.g. attention key biases, which softmax
/// cancels) would otherwise dominate.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error between the tape gradient and a central finite
/// difference, over `max_entries` randomly chosen coordinates (all if fewer).
pub fn grad_check<F>(params: &ParameterSet<f64>, loss: F, max_entries: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &ParameterSet<f64>) -> Var,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, params);
    let floor = GRAD_FLOOR * tape.value(l)[0].abs().max(1.0);
    let grads = tape.backward(l).expect("scalar loss");
    let mut analytic = params.clone();
    analytic.zero_grad();
    grads.apply_to(&mut analytic).unwrap();

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if coords.len() > max_entries {
        for i in 0..max_entries {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_entries);
    }
    let eval = |p: &ParameterSet<f64>| {
        let mut t = Tape::new();
        let v = loss(&mut t, p);
        t.value(v)[0]
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, i) in coords {
        let orig = params.get(&name).unwrap().data[i];
        probe.get_mut(&name).unwrap().data[i] = orig + FD_STEP;
        let up = eval(&probe);
        probe.get_mut(&name).unwrap().data[i] = orig - FD_STEP;
        let down = eval(&probe);
        probe.get_mut(&name).unwrap().data[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(&name).unwrap().grad.as_ref().unwrap()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// `sum(x ∘ r)` for a fixed random `r`, so every output coordinate matters.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let r = tape
        .constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let p = tape.mul(x, r).unwrap();
    tape.sum(p).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Replaces every parameter value with U(-scale, scale) noise, so biases and
/// gains are not at their trivial initial values.
pub fn jitter(params: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Random tokenized sequence over char ids `[3, char_vocab)` and subword ids `[3, subword_vocab)`.
pub fn random_sequence(rng: &mut ChaCha8Rng, subword_vocab: usize, char_vocab: usize, max_tokens: usize, zero_timing: bool) -> TokenizedSequence {
    let n = rng.random_range(1..=max_tokens);
    let mut tokens = vec![TokenUnit::cls()];
    for _ in 0..n {
        let len = rng.random_range(1..=4);
        let char_ids: Vec<usize> = (0..len).map(|_| rng.random_range(3..char_vocab)).collect();
        let mut timing = || -> Vec<f64> {
            (0..len)
                .map(|_| if zero_timing { 0.0 } else { rng.random_range(-2.0..2.0) })
                .collect()
        };
        let hold = timing();
        let flight = timing();
        tokens.push(TokenUnit {
            subword_id: rng.random_range(3..subword_vocab),
            char_ids,
            hold,
            flight,
        });
    }
    TokenizedSequence {
        user_id: "u".into(),
        session_id: "s".into(),
        tokens,
    }
}

/// Exhaustive EER: every score and +inf as threshold, counts by direct
/// scanning, first (lowest-threshold) minimiser of |FAR - FRR| in exact
/// integer arithmetic.
pub fn brute_force_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (ng, ni) = (genuine.len() as i64, impostor.len() as i64);
    let mut best: Option<(i64, i64, i64)> = None;
    for t in thresholds {
        let fa = impostor.iter().filter(|&&s| s >= t).count() as i64;
        let fr = genuine.iter().filter(|&&s| s < t).count() as i64;
        let gap = (fa * ng - fr * ni).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, fa, fr));
        }
    }
    let (_, fa, fr) = best.unwrap();
    (fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += euclid(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    total / points.len() as f64
}
