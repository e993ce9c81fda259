use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalGraph;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelConfig};
use crate::rng::substream;
use crate::tensor::{adamw_step, clip_grad_norm, cosine_warm_restart_lr, AdamWConfig, AdamWState, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Communication rounds (federated) or epochs (centralized, isolated).
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub base_lr: f64,
    pub t0: u64,
    pub t_mult: u64,
    pub max_grad_norm: f64,
    pub patience: usize,
    pub adamw: AdamWConfig,
    /// Set from the run seed, not read from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            rounds: 60,
            local_epochs: 1,
            batch_size: 2,
            accum_steps: 1,
            base_lr: 3e-3,
            t0: 10,
            t_mult: 1,
            max_grad_norm: 1.0,
            patience: 15,
            adamw: AdamWConfig::default(),
            seed: 17,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be positive"));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::invalid("batch_size", "batch_size and accum_steps must be positive"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr", "must be finite and >= 0"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid("max_grad_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Sample-weighted mean `Σ n_k·w_k / Σ n_k`, accumulated in f64 in client
/// order.
pub fn fedavg_aggregate<T: Real>(stores: &[ParamStore<T>], counts: &[usize]) -> Result<ParamStore<T>> {
    let first = stores
        .first()
        .ok_or_else(|| Error::invalid("clients", "nothing to aggregate"))?;
    if stores.len() != counts.len() {
        return Err(Error::shape(format!(
            "{} stores with {} counts",
            stores.len(),
            counts.len()
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::invalid("clients", "every client needs n_k > 0"));
    }
    if stores.iter().any(|s| !s.same_layout(first)) {
        return Err(Error::shape("client parameter layouts differ".to_string()));
    }
    let total: usize = counts.iter().sum();
    let mut acc = vec![0f64; first.numel()];
    for (s, &n) in stores.iter().zip(counts) {
        let w = n as f64;
        for (a, v) in acc.iter_mut().zip(s.flatten()) {
            *a += w * v.as_f64();
        }
    }
    let flat: Vec<T> = acc.iter().map(|&a| T::from_f64(a / total as f64)).collect();
    first.unflatten(&flat)
}

/// Stops once `round − best_round > patience`; improvement is a strictly
/// higher metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_round: Option<usize>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_round: None,
        }
    }

    /// Records the metric of `round`; true when it is a new best.
    pub fn observe(&mut self, round: usize, metric: f64) -> bool {
        if metric > self.best || self.best_round.is_none() {
            self.best = metric;
            self.best_round = Some(round);
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, round: usize) -> bool {
        self.best_round.is_some_and(|b| round - b > self.patience)
    }
}

/// One pass over a client's training graphs starting from `global`.
///
/// Graphs are visited in an order shuffled by the `(seed, client, epoch)`
/// stream; the graph at position `i` draws its PE signs and dropout masks
/// from `(seed, client, epoch, i)`. Per-graph gradients are averaged over
/// `batch_size · accum_steps` graphs (or whatever is left at the end of the
/// pass), clipped, and applied with AdamW at the cosine learning rate of
/// `epoch`. Returns the new parameters and the mean training loss.
pub fn local_train_epoch(
    global: &ParamStore<f32>,
    state: &mut AdamWState<f32>,
    graphs: &[&EvalGraph],
    cfg: &ModelConfig,
    sched: &Schedule,
    client: usize,
    epoch: usize,
) -> Result<(ParamStore<f32>, f64)> {
    if graphs.is_empty() {
        return Err(Error::invalid("clients", format!("client {client} has no training graphs")));
    }
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    order.shuffle(&mut substream(sched.seed, &[client as u64, epoch as u64]));
    let lr = cosine_warm_restart_lr(epoch as u64, sched.base_lr, sched.t0, sched.t_mult);
    let window = sched.batch_size * sched.accum_steps;
    let mut loss_sum = 0.0;
    for (w, chunk) in order.chunks(window).enumerate() {
        let snapshot = &params;
        let results: Vec<(f64, ParamStore<f32>)> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, &gi)| {
                let pos = (w * window + j) as u64;
                let mut rng = substream(sched.seed, &[client as u64, epoch as u64, pos]);
                let signs: Vec<f64> = (0..cfg.pe_dim)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                loss_and_grad(snapshot, cfg, &graphs[gi].input, &signs, &mut Some(&mut rng)).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "client {client} epoch {epoch} case {}: {m}",
                        graphs[gi].case_id
                    )),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        let mut grad = results[0].1.zeros_like();
        let scale = 1.0 / results.len() as f32;
        for (loss, g) in &results {
            loss_sum += loss;
            for (acc, t) in grad.tensors_mut().iter_mut().zip(g.tensors()) {
                for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += v * scale;
                }
            }
        }
        clip_grad_norm(&mut grad, sched.max_grad_norm);
        adamw_step(&mut params, &grad, state, lr, &sched.adamw)?;
    }
    Ok((params, loss_sum / graphs.len() as f64))
}
