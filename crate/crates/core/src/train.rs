//! Supervised training of user-identification networks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::TokenizedSequence;
use crate::error::{Error, Result};
use crate::model::TempCharModel;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;

/// Anything that maps a batch of sequences to pooled embeddings and user logits.
pub trait Network<S: Scalar> {
    fn params(&self) -> &ParameterSet<S>;
    fn params_mut(&mut self) -> &mut ParameterSet<S>;
    /// Returns `(pooled [B, P], logits [B, U])`. Dropout is active iff `rng` is given.
    fn forward_batch(
        &self,
        tape: &mut Tape<S>,
        batch: &[&TokenizedSequence],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)>;
}

impl<S: Scalar> Network<S> for TempCharModel<S> {
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
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let out = self.forward(tape, batch, rng)?;
        Ok((out.pooled, out.logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings used for the synthetic benchmark when training from scratch.
    pub fn benchmark() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 5e-4,
                ..AdamConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.adam.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Mean cross-entropy of `net` on `samples`, no dropout.
pub fn mean_loss<S: Scalar, N: Network<S>>(net: &N, samples: &[&TokenizedSequence], labels: &[usize]) -> Result<f64> {
    if samples.len() != labels.len() {
        return Err(Error::shape("mean_loss", &[samples.len()], &[labels.len()]));
    }
    if samples.is_empty() {
        return Err(Error::Empty("loss over no samples".into()));
    }
    let mut total = 0.0;
    for (chunk, lab) in samples.chunks(32).zip(labels.chunks(32)) {
        let mut tape = Tape::new();
        let (_, logits) = net.forward_batch(&mut tape, chunk, None)?;
        let loss = tape.cross_entropy(logits, lab)?;
        total += tape.value(loss)[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch Adam on cross-entropy.
///
/// One RNG seeded from `seed` drives both the per-epoch shuffle and dropout,
/// so a run is fully determined by its inputs.
pub fn fit<S: Scalar, N: Network<S>>(
    net: &mut N,
    samples: &[&TokenizedSequence],
    labels: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    config.validate()?;
    if samples.len() != labels.len() {
        return Err(Error::shape("fit", &[samples.len()], &[labels.len()]));
    }
    if samples.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(config.adam, net.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&TokenizedSequence> = idx.iter().map(|&i| samples[i]).collect();
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (_, logits) = net.forward_batch(&mut tape, &batch, Some(&mut rng))?;
            let loss = tape.cross_entropy(logits, &lab)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} in epoch {}", epoch + 1)));
            }
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            net.params_mut().zero_grad();
            grads.apply_to(net.params_mut())?;
            adam.step(net.params_mut())?;
        }
        let mean = total / samples.len() as f64;
        log::debug!("epoch {} loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    if net.params().iter().any(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence("non-finite weights after training".into()));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, DatasetSplit, SplitConfig, UserProfile};
    use crate::model::{Mode, ModelConfig};

    fn toy_split() -> DatasetSplit {
        let profiles = [UserProfile::uniform(80.0, 60.0, 5.0), UserProfile::uniform(180.0, 140.0, 5.0)];
        let pool = vec!["the cat".to_string(), "a dog".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = synth::generate_from_profiles(&profiles, 10, &pool, &mut rng).unwrap();
        DatasetSplit::prepare(&samples, &SplitConfig::default(), 1).unwrap()
    }

    fn toy_model(split: &DatasetSplit) -> TempCharModel<f64> {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            char_embed_dim: 8,
            char_hidden: 8,
            max_seq_len: 32,
            num_users: split.num_users(),
            subword_vocab: split.vocab.subword_count(),
            char_vocab: split.vocab.char_count(),
            dropout: 0.0,
            mode: Mode::TempChar,
            ..ModelConfig::default()
        };
        TempCharModel::new(cfg, 7).unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
        }
    }

    #[test]
    fn loss_decreases() {
        let split = toy_split();
        let mut m = toy_model(&split);
        let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
        let ys = split.train_labels();
        let before = mean_loss(&m, &xs, &ys).unwrap();
        fit(&mut m, &xs, &ys, &config(3), 0).unwrap();
        let after = mean_loss(&m, &xs, &ys).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn deterministic() {
        let split = toy_split();
        let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
        let ys = split.train_labels();
        let run = || {
            let mut m = toy_model(&split);
            let log = fit(&mut m, &xs, &ys, &config(2), 5).unwrap();
            (m.params, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(a.values_eq(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn zero_epochs_leave_weights() {
        let split = toy_split();
        let mut m = toy_model(&split);
        let before = m.params.clone();
        let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
        let log = fit(&mut m, &xs, &split.train_labels(), &config(0), 0).unwrap();
        assert!(log.epoch_losses.is_empty());
        assert!(m.params.values_eq(&before));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let split = toy_split();
        let mut m = toy_model(&split);
        assert!(matches!(fit(&mut m, &[], &[], &config(1), 0), Err(Error::Empty(_))));
        let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
        assert!(fit(&mut m, &xs, &[0], &config(1), 0).is_err());
    }

    #[test]
    fn huge_learning_rate_is_caught() {
        let split = toy_split();
        let mut m = toy_model(&split);
        let xs: Vec<&TokenizedSequence> = split.train.iter().collect();
        let mut c = config(1);
        c.adam.learning_rate = f64::INFINITY;
        assert!(fit(&mut m, &xs, &split.train_labels(), &c, 0).is_err());
        c.adam.learning_rate = 1e300;
        assert!(matches!(
            fit(&mut m, &xs, &split.train_labels(), &c, 0),
            Err(Error::Divergence(_))
        ));
    }
}
