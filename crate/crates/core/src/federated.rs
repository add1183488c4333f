//! Federated averaging over simulated clients.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, TokenizedSequence};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::TempCharModel;
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Whole users per client, round-robin by descending sample count.
    #[default]
    ByUser,
    /// Shuffled samples cut into near-equal chunks.
    IidShards,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub sample_ratio: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub seed: u64,
    pub partition: PartitionPolicy,
    /// Train the selected clients of a round on the rayon pool. Results are
    /// identical to the sequential mode.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            sample_ratio: 0.1,
            rounds: 5,
            local_epochs: 1,
            seed: 0,
            partition: PartitionPolicy::ByUser,
            parallel: false,
        }
    }
}

impl FedConfig {
    /// 10 of 100 clients for 5 rounds over shuffled sample shards, 5 local epochs.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            local_epochs: 5,
            seed,
            partition: PartitionPolicy::IidShards,
            ..Self::default()
        }
    }

    pub fn clients_per_round(&self) -> usize {
        (self.num_clients as f64 * self.sample_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::Config(format!("sample_ratio {} must be in (0, 1]", self.sample_ratio)));
        }
        if self.num_clients == 0 || self.clients_per_round() == 0 {
            return Err(Error::Config("at least one client must be selected per round".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Indices into the training split, ascending.
    pub indices: Vec<usize>,
    pub sample_count: usize,
}

impl ClientShard {
    fn new(client_id: usize, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self {
            client_id,
            sample_count: indices.len(),
            indices,
        }
    }
}

pub fn partition(split: &DatasetSplit, policy: PartitionPolicy, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be positive".into()));
    }
    let n = split.train.len();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    match policy {
        PartitionPolicy::ByUser => {
            let users = split.num_users();
            if num_clients > users {
                return Err(Error::Config(format!(
                    "{num_clients} clients but only {users} users under by_user partitioning"
                )));
            }
            let labels = split.train_labels();
            let mut counts = vec![0usize; users];
            labels.iter().for_each(|&l| counts[l] += 1);
            let mut order: Vec<usize> = (0..users).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let mut owner = vec![0usize; users];
            for (k, &u) in order.iter().enumerate() {
                owner[u] = k % num_clients;
            }
            for (i, &l) in labels.iter().enumerate() {
                buckets[owner[l]].push(i);
            }
        }
        PartitionPolicy::IidShards => {
            if num_clients > n {
                return Err(Error::Config(format!("{num_clients} clients but only {n} training samples")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (n / num_clients, n % num_clients);
            let mut start = 0;
            for (c, b) in buckets.iter_mut().enumerate() {
                let len = base + usize::from(c < extra);
                b.extend_from_slice(&idx[start..start + len]);
                start += len;
            }
        }
    }
    Ok(buckets.into_iter().enumerate().map(|(c, b)| ClientShard::new(c, b)).collect())
}

/// Seed of a client's local run. Round 0, client 0 uses the run seed itself.
pub fn client_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    seed ^ (((round as u64) << 32) | client_id as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<S> {
    pub client_id: usize,
    pub weights: ParameterSet<S>,
    pub sample_count: usize,
    pub final_loss: Option<f64>,
}

/// Trains a copy of `global` on the shard; `global` itself is untouched.
pub fn client_update<S: Scalar>(
    global: &TempCharModel<S>,
    split: &DatasetSplit,
    shard: &ClientShard,
    local_epochs: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<ClientUpdate<S>> {
    if shard.indices.is_empty() {
        return Err(Error::Empty(format!("shard of client {}", shard.client_id)));
    }
    let mut local = global.clone();
    local.params.clear_grad();
    let labels = split.train_labels();
    let xs: Vec<&TokenizedSequence> = shard.indices.iter().map(|&i| &split.train[i]).collect();
    let ys: Vec<usize> = shard.indices.iter().map(|&i| labels[i]).collect();
    let cfg = TrainConfig {
        epochs: local_epochs,
        ..*train
    };
    let log = fit(&mut local, &xs, &ys, &cfg, seed)?;
    local.params.clear_grad();
    Ok(ClientUpdate {
        client_id: shard.client_id,
        weights: local.params,
        sample_count: shard.sample_count,
        final_loss: log.final_loss(),
    })
}

/// Sample-count weighted mean of client weights, accumulated in the given order.
pub fn fedavg_aggregate<S: Scalar>(updates: &[(&ParameterSet<S>, usize)]) -> Result<ParameterSet<S>> {
    let (first, _) = updates.first().ok_or_else(|| Error::Empty("no client updates".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Config("all client sample counts are zero".into()));
    }
    for (p, _) in updates {
        if !first.same_layout(p) {
            return Err(Error::Config("client weights differ in layout".into()));
        }
    }
    let weights: Vec<S> = updates.iter().map(|(_, n)| S::of(*n as f64 / total as f64)).collect();
    let mut out = (*first).clone();
    for (name, t) in out.iter_mut() {
        t.grad = None;
        for (j, v) in t.data.iter_mut().enumerate() {
            let mut acc = S::zero();
            for ((p, _), &w) in updates.iter().zip(&weights) {
                acc += w * p.get(name)?.data[j];
            }
            *v = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub sample_count: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientReport>,
    pub total_samples: usize,
    pub test_accuracy: f64,
}

/// Selected client ids of a round, ascending.
pub fn select_clients(config: &FedConfig, round: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(round as u64 + 1);
    let mut ids = index::sample(&mut rng, config.num_clients, config.clients_per_round()).into_vec();
    ids.sort_unstable();
    ids
}

/// Runs the protocol from `global` and returns the final global model with
/// one report per round.
pub fn run_rounds<S: Scalar>(
    config: &FedConfig,
    mut global: TempCharModel<S>,
    split: &DatasetSplit,
    train: &TrainConfig,
) -> Result<(TempCharModel<S>, Vec<RoundReport>)> {
    config.validate()?;
    let shards = partition(split, config.partition, config.num_clients, config.seed)?;
    let test: Vec<&TokenizedSequence> = split.test.iter().collect();
    let test_labels = split.test_labels();
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let selected = select_clients(config, round);
        let run = |&c: &usize| client_update(&global, split, &shards[c], config.local_epochs, train, client_seed(config.seed, round, c));
        let updates: Vec<ClientUpdate<S>> = if config.parallel {
            selected.par_iter().map(run).collect::<Result<_>>()?
        } else {
            selected.iter().map(run).collect::<Result<_>>()?
        };
        let pairs: Vec<(&ParameterSet<S>, usize)> = updates.iter().map(|u| (&u.weights, u.sample_count)).collect();
        global.params = fedavg_aggregate(&pairs)?;
        let test_accuracy = if test.is_empty() {
            0.0
        } else {
            eval::accuracy(&eval::predict(&global, &test)?, &test_labels)?
        };
        let report = RoundReport {
            round: round + 1,
            selected,
            total_samples: updates.iter().map(|u| u.sample_count).sum(),
            clients: updates
                .iter()
                .map(|u| ClientReport {
                    client_id: u.client_id,
                    sample_count: u.sample_count,
                    final_loss: u.final_loss,
                })
                .collect(),
            test_accuracy,
        };
        log::info!("round {} accuracy {:.4}", report.round, report.test_accuracy);
        reports.push(report);
    }
    Ok((global, reports))
}
