use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bytes_per_round, combine, fedavg_aggregate, local_train_epoch, score_graphs, EarlyStopper, EvalGraph, Metrics, Schedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{cosine_warm_restart_lr, AdamWState, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Centralized,
    Federated,
    Isolated,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Centralized => "centralized",
            Paradigm::Federated => "federated",
            Paradigm::Isolated => "isolated",
        }
    }
}

pub const CSV_HEADER: &str =
    "paradigm,client,round,train_loss,lr,bytes_uploaded,test_loss,dice,precision,recall,f1,local_dice";

/// One row of the per-round log.
///
/// `client` is `None` for the global model of a centralized or federated
/// run. `test` is always measured on the pooled test set; `local_dice` on the
/// client's own test cases (the pooled Dice for global rows). Wall time is
/// kept out of the CSV so that logs are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub paradigm: Paradigm,
    pub client: Option<usize>,
    pub round: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub bytes_uploaded: u64,
    pub test: Metrics,
    pub local_dice: f64,
    pub wall_seconds: f64,
}

impl RoundReport {
    pub fn csv_row(&self) -> String {
        let client = self.client.map_or_else(|| "all".to_string(), |c| c.to_string());
        let m = &self.test;
        format!(
            "{},{client},{},{:.8},{:.8e},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.paradigm.as_str(),
            self.round,
            self.train_loss,
            self.lr,
            self.bytes_uploaded,
            m.loss,
            m.dice,
            m.precision,
            m.recall,
            m.f1,
            self.local_dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunHistory {
    pub paradigm: Paradigm,
    pub client: Option<usize>,
    pub reports: Vec<RoundReport>,
    pub best_round: usize,
    /// Last round that was executed.
    pub stopped_round: usize,
    pub early_stopped: bool,
    pub best_params: ParamStore<f32>,
    /// Pooled-test metrics of `best_params`.
    pub final_metrics: Metrics,
    /// Flattened parameters after every round, when requested.
    pub trajectory: Vec<Vec<f32>>,
}

impl RunHistory {
    /// Rows describing the global (or isolated) model, one per round.
    pub fn primary_rows(&self) -> impl Iterator<Item = &RoundReport> {
        self.reports.iter().filter(move |r| r.client == self.client)
    }
}

fn lr_of(sched: &Schedule, round: usize) -> f64 {
    let last = (round + 1) * sched.local_epochs - 1;
    cosine_warm_restart_lr(last as u64, sched.base_lr, sched.t0, sched.t_mult)
}

fn train_round(
    params: &ParamStore<f32>,
    state: &mut AdamWState<f32>,
    graphs: &[&EvalGraph],
    cfg: &ModelConfig,
    sched: &Schedule,
    client: usize,
    round: usize,
) -> Result<(ParamStore<f32>, f64)> {
    let mut p = params.clone();
    let mut loss = 0.0;
    for e in 0..sched.local_epochs {
        let (next, l) = local_train_epoch(&p, state, graphs, cfg, sched, client, round * sched.local_epochs + e)?;
        p = next;
        loss += l;
    }
    Ok((p, loss / sched.local_epochs as f64))
}

fn check_inputs(cfg: &ModelConfig, sched: &Schedule, init: &ParamStore<f32>, test: &[&EvalGraph]) -> Result<()> {
    cfg.validate()?;
    sched.validate()?;
    if init.is_empty() {
        return Err(Error::invalid("params", "initial parameter store is empty"));
    }
    if test.is_empty() {
        return Err(Error::invalid("clients", "the pooled test set is empty"));
    }
    Ok(())
}

fn pooled<'a>(test: &[Vec<&'a EvalGraph>]) -> (Vec<&'a EvalGraph>, Vec<Range<usize>>) {
    let mut all = Vec::new();
    let mut ranges = Vec::with_capacity(test.len());
    for t in test {
        let start = all.len();
        all.extend(t.iter().copied());
        ranges.push(start..all.len());
    }
    (all, ranges)
}

/// Trains one model on all training graphs. A round is `local_epochs`
/// passes, using the same random streams as federated client 0, so a
/// one-client federation reproduces this run exactly.
pub fn run_centralized(
    init: &ParamStore<f32>,
    train: &[&EvalGraph],
    test: &[&EvalGraph],
    cfg: &ModelConfig,
    sched: &Schedule,
    keep_trajectory: bool,
) -> Result<RunHistory> {
    check_inputs(cfg, sched, init, test)?;
    let mut params = init.clone();
    let mut state = AdamWState::new(init);
    let mut stopper = EarlyStopper::new(sched.patience);
    let mut h = RunHistory {
        paradigm: Paradigm::Centralized,
        client: None,
        reports: Vec::new(),
        best_round: 0,
        stopped_round: 0,
        early_stopped: false,
        best_params: init.clone(),
        final_metrics: Metrics::default(),
        trajectory: Vec::new(),
    };
    for round in 0..sched.rounds {
        let t = Instant::now();
        let (next, train_loss) = train_round(&params, &mut state, train, cfg, sched, 0, round)?;
        params = next;
        let m = combine(&score_graphs(&params, cfg, test)?);
        h.reports.push(RoundReport {
            paradigm: Paradigm::Centralized,
            client: None,
            round,
            train_loss,
            lr: lr_of(sched, round),
            bytes_uploaded: 0,
            test: m,
            local_dice: m.dice,
            wall_seconds: t.elapsed().as_secs_f64(),
        });
        if keep_trajectory {
            h.trajectory.push(params.flatten());
        }
        if stopper.observe(round, m.dice) {
            h.best_round = round;
            h.best_params = params.clone();
            h.final_metrics = m;
        }
        h.stopped_round = round;
        if stopper.should_stop(round) {
            h.early_stopped = true;
            break;
        }
    }
    Ok(h)
}

/// Federated averaging. Every round each client starts from the global
/// model, trains `local_epochs` passes with its own persistent AdamW state,
/// and the server replaces the global model with the sample-weighted mean.
/// Early stopping watches the pooled-test Dice of the global model.
pub fn run_federated(
    init: &ParamStore<f32>,
    train: &[Vec<&EvalGraph>],
    test: &[Vec<&EvalGraph>],
    cfg: &ModelConfig,
    sched: &Schedule,
    keep_trajectory: bool,
) -> Result<RunHistory> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::invalid("clients", "need matching, non-empty train and test lists per client"));
    }
    let (all_test, ranges) = pooled(test);
    check_inputs(cfg, sched, init, &all_test)?;
    let counts: Vec<usize> = train.iter().map(Vec::len).collect();
    let upload = bytes_per_round(init.numel());
    let mut global = init.clone();
    let mut states: Vec<AdamWState<f32>> = train.iter().map(|_| AdamWState::new(init)).collect();
    let mut stopper = EarlyStopper::new(sched.patience);
    let mut h = RunHistory {
        paradigm: Paradigm::Federated,
        client: None,
        reports: Vec::new(),
        best_round: 0,
        stopped_round: 0,
        early_stopped: false,
        best_params: init.clone(),
        final_metrics: Metrics::default(),
        trajectory: Vec::new(),
    };
    for round in 0..sched.rounds {
        let t = Instant::now();
        let local: Vec<(ParamStore<f32>, f64)> = states
            .par_iter_mut()
            .zip(train.par_iter())
            .enumerate()
            .map(|(k, (state, graphs))| train_round(&global, state, graphs, cfg, sched, k, round))
            .collect::<Result<_>>()?;
        let (stores, losses): (Vec<_>, Vec<_>) = local.into_iter().unzip();
        global = fedavg_aggregate(&stores, &counts)?;
        let scores = score_graphs(&global, cfg, &all_test)?;
        let m = combine(&scores);
        let lr = lr_of(sched, round);
        let wall = t.elapsed().as_secs_f64();
        let n_total: usize = counts.iter().sum();
        let mean_loss = losses.iter().zip(&counts).map(|(l, &n)| l * n as f64).sum::<f64>() / n_total as f64;
        h.reports.push(RoundReport {
            paradigm: Paradigm::Federated,
            client: None,
            round,
            train_loss: mean_loss,
            lr,
            bytes_uploaded: upload * train.len() as u64,
            test: m,
            local_dice: m.dice,
            wall_seconds: wall,
        });
        for (k, r) in ranges.iter().enumerate() {
            let local_m = combine(&scores[r.clone()]);
            h.reports.push(RoundReport {
                paradigm: Paradigm::Federated,
                client: Some(k),
                round,
                train_loss: losses[k],
                lr,
                bytes_uploaded: upload,
                test: local_m,
                local_dice: local_m.dice,
                wall_seconds: wall,
            });
        }
        if keep_trajectory {
            h.trajectory.push(global.flatten());
        }
        if stopper.observe(round, m.dice) {
            h.best_round = round;
            h.best_params = global.clone();
            h.final_metrics = m;
        }
        h.stopped_round = round;
        if stopper.should_stop(round) {
            h.early_stopped = true;
            break;
        }
    }
    Ok(h)
}

/// Each client trains alone on its own cases. Early stopping watches the
/// client's local test Dice; every row also reports the pooled-test metrics
/// so the isolated models can be compared with the shared ones.
pub fn run_isolated(
    init: &ParamStore<f32>,
    train: &[Vec<&EvalGraph>],
    test: &[Vec<&EvalGraph>],
    cfg: &ModelConfig,
    sched: &Schedule,
) -> Result<Vec<RunHistory>> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::invalid("clients", "need matching, non-empty train and test lists per client"));
    }
    let (all_test, ranges) = pooled(test);
    check_inputs(cfg, sched, init, &all_test)?;
    (0..train.len())
        .into_par_iter()
        .map(|k| {
            let mut params = init.clone();
            let mut state = AdamWState::new(init);
            let mut stopper = EarlyStopper::new(sched.patience);
            let mut h = RunHistory {
                paradigm: Paradigm::Isolated,
                client: Some(k),
                reports: Vec::new(),
                best_round: 0,
                stopped_round: 0,
                early_stopped: false,
                best_params: init.clone(),
                final_metrics: Metrics::default(),
                trajectory: Vec::new(),
            };
            for round in 0..sched.rounds {
                let t = Instant::now();
                let (next, train_loss) = train_round(&params, &mut state, &train[k], cfg, sched, k, round)?;
                params = next;
                let scores = score_graphs(&params, cfg, &all_test)?;
                let m = combine(&scores);
                // A client without local test cases falls back to the pooled set.
                let local = if ranges[k].is_empty() {
                    m.dice
                } else {
                    combine(&scores[ranges[k].clone()]).dice
                };
                h.reports.push(RoundReport {
                    paradigm: Paradigm::Isolated,
                    client: Some(k),
                    round,
                    train_loss,
                    lr: lr_of(sched, round),
                    bytes_uploaded: 0,
                    test: m,
                    local_dice: local,
                    wall_seconds: t.elapsed().as_secs_f64(),
                });
                if stopper.observe(round, local) {
                    h.best_round = round;
                    h.best_params = params.clone();
                    h.final_metrics = m;
                }
                h.stopped_round = round;
                if stopper.should_stop(round) {
                    h.early_stopped = true;
                    break;
                }
            }
            Ok(h)
        })
        .collect()
}
