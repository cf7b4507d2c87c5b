//! Synchronous FedAvg over simulated clients.
//!
//! Each round samples `K` clients without replacement, trains each from the
//! current global parameters for `E` local epochs and replaces the global
//! parameters with the data-size weighted mean of the results. Every random
//! stream is derived from `(rng_seed, round, client)` so a run is a pure
//! function of its inputs, whatever order clients are executed in.
//!
//! Aggregation only ever sums client vectors; a secure-aggregation layer
//! could sit in front of [`aggregate`] without changing the result.

use std::io::Write;

use num_integer::Integer;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LinearModel, Sample, Task, TrainConfig};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    /// `K`; `None` samples every eligible client each round.
    pub sampled_per_round: Option<usize>,
    pub local_epochs: usize,
    pub rounds: usize,
    pub train: TrainConfig,
    pub rng_seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            sampled_per_round: None,
            local_epochs: 1,
            rounds: 1000,
            train: TrainConfig::default(),
            rng_seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.sampled_per_round == Some(0) {
            return Err(Error::Config("sampled_per_round must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate<T> {
    pub client_id: usize,
    pub n_i: usize,
    pub params: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    pub round_index: usize,
    pub global_params: Vec<T>,
    pub history: Vec<RoundRecord>,
}

/// Local training for one kind of model over one kind of client data.
pub trait LocalTrainer<T: Scalar>: Sync {
    type Client: Sync;

    fn sample_count(&self, client: &Self::Client) -> usize;

    /// Trains from `params` for `epochs` epochs and returns the new
    /// flattened parameters. `cfg.rng_seed` is already client-specific.
    fn train_local(&self, params: &[T], client: &Self::Client, epochs: usize, cfg: &TrainConfig) -> Vec<T>;
}

/// `K` distinct ids from `0..n`, uniform without replacement, ascending.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::TooFewClients {
            requested: k,
            available: n,
        });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}

/// Seed for one client's local training in one round.
pub fn client_round_seed(rng_seed: u64, round: usize, client_id: usize) -> u64 {
    seed::derive(&[rng_seed, round as u64, client_id as u64])
}

fn sampling_seed(rng_seed: u64, round: usize) -> u64 {
    seed::derive(&[rng_seed, round as u64, u64::MAX])
}

#[allow(clippy::too_many_arguments)]
pub fn local_update<T: Scalar, L: LocalTrainer<T>>(
    trainer: &L,
    global_params: &[T],
    client_id: usize,
    client: &L::Client,
    epochs: usize,
    train_cfg: &TrainConfig,
    rng_seed: u64,
    round: usize,
) -> RoundUpdate<T> {
    let n_i = trainer.sample_count(client);
    let params = if epochs == 0 {
        global_params.to_vec()
    } else {
        let cfg = TrainConfig {
            rng_seed: client_round_seed(rng_seed, round, client_id),
            ..train_cfg.clone()
        };
        trainer.train_local(global_params, client, epochs, &cfg)
    };
    RoundUpdate { client_id, n_i, params }
}

/// Data-size weighted mean `Σ (n_i / n) · params_i`, accumulated in
/// ascending client order. Each ratio is reduced to lowest terms before it
/// is converted, so scaling every `n_i` by a common factor changes nothing.
/// The sum is taken relative to the first update, which makes the result
/// exact when all updates agree.
pub fn aggregate<T: Scalar>(updates: &[RoundUpdate<T>]) -> Result<Vec<T>> {
    let mut ordered: Vec<&RoundUpdate<T>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let reference = ordered.first().ok_or(Error::NoUpdates)?;
    let dim = reference.params.len();
    let total: usize = ordered.iter().map(|u| u.n_i).sum();
    if total == 0 {
        return Err(Error::Config("client updates carry no samples".into()));
    }
    let mut acc = vec![T::zero(); dim];
    for u in &ordered {
        if u.params.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: u.params.len(),
            });
        }
        let g = u.n_i.gcd(&total);
        let weight = T::of_usize(u.n_i / g) / T::of_usize(total / g);
        for ((a, &p), &r) in acc.iter_mut().zip(&u.params).zip(&reference.params) {
            *a = *a + weight * (p - r);
        }
    }
    Ok(reference
        .params
        .iter()
        .zip(&acc)
        .map(|(&r, &a)| r + a)
        .collect())
}

/// Runs `cfg.rounds` FedAvg rounds from `init`. `eval_hook` sees the
/// global parameters after each round and may return metrics to record.
pub fn run_rounds<T, L, F>(
    cfg: &FlConfig,
    trainer: &L,
    clients: &[L::Client],
    init: Vec<T>,
    mut eval_hook: F,
) -> Result<ServerState<T>>
where
    T: Scalar,
    L: LocalTrainer<T>,
    F: FnMut(usize, &[T]) -> Vec<(String, f64)>,
{
    let pool: Vec<usize> = (0..clients.len())
        .filter(|&i| trainer.sample_count(&clients[i]) > 0)
        .collect();
    let k = cfg.sampled_per_round.unwrap_or(pool.len());
    if cfg.rounds > 0 && (pool.is_empty() || k == 0 || k > pool.len()) {
        return Err(Error::TooFewClients {
            requested: k.max(1),
            available: pool.len(),
        });
    }
    let mut state = ServerState {
        round_index: 0,
        global_params: init,
        history: Vec::new(),
    };
    for round in 0..cfg.rounds {
        let picked = if k == pool.len() {
            pool.clone()
        } else {
            let mut rng = seed::rng(sampling_seed(cfg.rng_seed, round));
            sample_clients(pool.len(), k, &mut rng)?
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        let global = &state.global_params;
        let updates: Vec<RoundUpdate<T>> = picked
            .par_iter()
            .map(|&id| {
                local_update(
                    trainer,
                    global,
                    id,
                    &clients[id],
                    cfg.local_epochs,
                    &cfg.train,
                    cfg.rng_seed,
                    round,
                )
            })
            .collect();
        state.global_params = aggregate(&updates)?;
        state.round_index = round + 1;
        for (metric, value) in eval_hook(round, &state.global_params) {
            state.history.push(RoundRecord { round, metric, value });
        }
    }
    Ok(state)
}

/// Writes `round,metric,value` rows.
pub fn write_history_csv<W: Write>(history: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io("history.csv", e))?;
    Ok(())
}

/// FedAvg over a single [`LinearModel`] whose clients hold plain samples.
#[derive(Debug, Clone, Copy)]
pub struct LinearTrainer {
    pub task: Task,
    pub dim: usize,
}

impl<T: Scalar> LocalTrainer<T> for LinearTrainer {
    type Client = Vec<Sample<T>>;

    fn sample_count(&self, client: &Self::Client) -> usize {
        client.len()
    }

    fn train_local(&self, params: &[T], client: &Self::Client, epochs: usize, cfg: &TrainConfig) -> Vec<T> {
        let mut m = LinearModel::zeros(self.dim, self.task);
        m.read_params(params);
        let cfg = TrainConfig { epochs, ..cfg.clone() };
        model::train(&m, client, &cfg).to_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(client_id: usize, n_i: usize, params: Vec<f64>) -> RoundUpdate<f64> {
        RoundUpdate { client_id, n_i, params }
    }

    #[test]
    fn aggregate_examples() {
        let out = aggregate(&[upd(0, 1, vec![0.0]), upd(1, 3, vec![4.0])]).unwrap();
        assert_eq!(out, vec![3.0]);
        let out = aggregate(&[upd(0, 2, vec![1.0, 2.0]), upd(1, 2, vec![3.0, 6.0])]).unwrap();
        assert_eq!(out, vec![2.0, 4.0]);
        assert!(matches!(aggregate::<f64>(&[]), Err(Error::NoUpdates)));
        assert!(aggregate(&[upd(0, 1, vec![1.0]), upd(1, 1, vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn aggregate_order_independent() {
        let a = vec![upd(2, 5, vec![0.1, 0.7]), upd(0, 3, vec![0.3, -1.0]), upd(1, 1, vec![9.0, 0.0])];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(aggregate(&a).unwrap(), aggregate(&b).unwrap());
    }

    #[test]
    fn aggregate_equal_updates_exact() {
        let v = vec![0.1, 1.0 / 3.0, -7.25];
        let ups: Vec<_> = (0..7).map(|i| upd(i, i + 1, v.clone())).collect();
        assert_eq!(aggregate(&ups).unwrap(), v);
    }

    #[test]
    fn sampling() {
        let mut rng = seed::rng(1);
        assert_eq!(sample_clients(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = sample_clients(5, 1, &mut seed::rng(9)).unwrap();
        let b = sample_clients(5, 1, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        let c = sample_clients(10, 4, &mut rng).unwrap();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            sample_clients(3, 4, &mut rng),
            Err(Error::TooFewClients { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn zero_epochs_keeps_params() {
        let trainer = LinearTrainer { task: Task::Classification, dim: 2 };
        let client = vec![Sample::new(vec![1.0, 0.0], 1.0), Sample::new(vec![0.0, 1.0], 0.0)];
        let u = local_update(&trainer, &[0.5, 0.5, 0.1], 3, &client, 0, &TrainConfig::default(), 1, 0);
        assert_eq!(u.params, vec![0.5, 0.5, 0.1]);
        assert_eq!(u.n_i, 2);
        assert_eq!(u.client_id, 3);
    }

    #[test]
    fn single_sample_epoch_is_one_step() {
        let trainer = LinearTrainer { task: Task::Classification, dim: 2 };
        let client = vec![Sample::new(vec![1.0, -2.0], 1.0)];
        let cfg = TrainConfig::default();
        let u = local_update(&trainer, &[0.0, 0.0, 0.0], 0, &client, 1, &cfg, 5, 0);
        // gradient at zero is (0.5 - 1) * [x, 1]
        assert_eq!(u.params, vec![0.005, -0.01, 0.005]);
    }

    #[test]
    fn zero_rounds_returns_init() {
        let trainer = LinearTrainer { task: Task::Regression, dim: 1 };
        let clients = vec![vec![Sample::new(vec![1.0], 50.0)]];
        let cfg = FlConfig { rounds: 0, ..FlConfig::default() };
        let state = run_rounds(&cfg, &trainer, &clients, vec![0.25, 0.5], |_, _| vec![]).unwrap();
        assert_eq!(state.global_params, vec![0.25, 0.5]);
        assert_eq!(state.round_index, 0);
    }

    #[test]
    fn empty_clients_are_skipped() {
        let trainer = LinearTrainer { task: Task::Regression, dim: 1 };
        let clients = vec![vec![], vec![Sample::new(vec![1.0], 50.0)], vec![]];
        let cfg = FlConfig { rounds: 3, ..FlConfig::default() };
        let state = run_rounds(&cfg, &trainer, &clients, vec![0.0, 0.0], |r, p| {
            vec![("w".into(), p[0]), ("round".into(), r as f64)]
        })
        .unwrap();
        assert_eq!(state.round_index, 3);
        assert_eq!(state.history.len(), 6);
        let too_many = FlConfig { sampled_per_round: Some(2), ..cfg };
        assert!(run_rounds(&too_many, &trainer, &clients, vec![0.0, 0.0], |_, _| vec![]).is_err());
    }

    #[test]
    fn history_csv() {
        let hist = vec![RoundRecord { round: 0, metric: "loss".into(), value: 0.5 }];
        let mut buf = Vec::new();
        write_history_csv(&hist, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "round,metric,value\n0,loss,0.5\n");
    }
}
