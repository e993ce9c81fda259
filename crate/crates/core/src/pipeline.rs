//! The end-to-end pipeline as library calls: synthesize volumes, build
//! graphs, train under a paradigm, extract modality attention, and tabulate
//! runs. Every function reads and writes under the run's output directory.
//!
//! ```text
//! <out_dir>/volumes/case_0000.mmv      synthetic volumes
//! <out_dir>/graphs/case_0000.svg       supervoxel graphs
//! <out_dir>/<paradigm>/rounds.csv      per-round log (deterministic)
//! <out_dir>/<paradigm>/timing.csv      wall time per round
//! <out_dir>/<paradigm>/summary.json    best rounds and final metrics
//! <out_dir>/<paradigm>/*.ckpt          best checkpoints
//! <out_dir>/explain/attention.csv      per-case modality attention
//! <out_dir>/explain/stats.json         statistical report
//! ```

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::explain::{attention_csv, modality_attention, stat_report, ModalityAttention, StatReport};
use crate::fed::{
    bytes_per_round, partition_dataset, run_centralized, run_federated, run_isolated, ClientSplit, EvalGraph,
    Metrics, Paradigm, RunHistory, CSV_HEADER,
};
use crate::model::{init_params, predict_with_attention, GraphInput};
use crate::rng::derive_seed;
use crate::supervoxel::{build_supervoxel_graph, read_graph, write_graph, SupervoxelGraph};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};
use crate::volume::{read_volume, synth_volume, write_volume, Volume};

pub fn volume_path(cfg: &RunConfig, index: usize) -> PathBuf {
    cfg.out_dir.join("volumes").join(format!("case_{index:04}.mmv"))
}

pub fn graph_path(cfg: &RunConfig, index: usize) -> PathBuf {
    cfg.out_dir.join("graphs").join(format!("case_{index:04}.svg"))
}

pub fn run_dir(cfg: &RunConfig, paradigm: Paradigm) -> PathBuf {
    cfg.out_dir.join(paradigm.as_str())
}

/// Cases used for training and testing.
pub fn pool_cases(cfg: &RunConfig) -> Range<usize> {
    0..cfg.synth.n_volumes
}

/// Cases reserved for attention analysis, numbered after the pool.
pub fn held_out_cases(cfg: &RunConfig) -> Range<usize> {
    let n = cfg.synth.n_volumes;
    n..n + cfg.explain.held_out_cases
}

fn all_cases(cfg: &RunConfig) -> Range<usize> {
    0..held_out_cases(cfg).end
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize to JSON");
    s.push('\n');
    s
}

/// Generates and writes the pool and held-out volumes.
pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.synth.validate()?;
    all_cases(cfg)
        .into_par_iter()
        .map(|i| {
            let (v, _) = synth_volume(&cfg.synth, i)?;
            let path = volume_path(cfg, i);
            create_parent(&path)?;
            write_volume(&v, &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub case_id: String,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub positives: usize,
    pub prune_threshold: f64,
}

impl GraphSummary {
    fn of(g: &SupervoxelGraph) -> Self {
        Self {
            case_id: g.case_id.clone(),
            n_nodes: g.n_nodes(),
            n_edges: g.edges.len(),
            positives: g.labels.iter().filter(|&&l| l == 1).count(),
            prune_threshold: g.prune_threshold,
        }
    }
}

/// Graph of case `index`; its patch sampler draws from a stream tied to the
/// case index, so the result does not depend on which other cases are built.
pub fn build_case_graph(cfg: &RunConfig, v: &Volume, index: usize) -> Result<SupervoxelGraph> {
    build_supervoxel_graph(v, &cfg.graph, derive_seed(cfg.graph_seed(), &[index as u64]))
}

/// Reads every volume and writes its supervoxel graph.
pub fn preprocess(cfg: &RunConfig) -> Result<Vec<GraphSummary>> {
    cfg.graph.validate()?;
    all_cases(cfg)
        .into_par_iter()
        .map(|i| {
            let v = read_volume(&volume_path(cfg, i))?;
            let g = build_case_graph(cfg, &v, i)?;
            let path = graph_path(cfg, i);
            create_parent(&path)?;
            write_graph(&g, &path)?;
            Ok(GraphSummary::of(&g))
        })
        .collect()
}

pub fn load_graphs(cfg: &RunConfig, cases: Range<usize>) -> Result<Vec<SupervoxelGraph>> {
    cases.into_par_iter().map(|i| read_graph(&graph_path(cfg, i))).collect()
}

pub fn eval_graphs(cfg: &RunConfig, graphs: &[SupervoxelGraph]) -> Result<Vec<EvalGraph>> {
    graphs.par_iter().map(|g| EvalGraph::from_graph(g, &cfg.model)).collect()
}

/// Runs one paradigm on in-memory pool graphs (indexed like the pool).
/// Centralized training pools the clients' training cases in client order
/// and is tested on the union of their test cases, so every paradigm sees
/// the same test set.
pub fn train_graphs(
    cfg: &RunConfig,
    paradigm: Paradigm,
    pool: &[EvalGraph],
    keep_trajectory: bool,
) -> Result<(Vec<ClientSplit>, Vec<RunHistory>)> {
    let splits = partition_dataset(pool.len(), &cfg.partition)?;
    let init = init_params::<f32>(&cfg.model, cfg.init_seed())?;
    let train: Vec<Vec<&EvalGraph>> = splits.iter().map(|s| s.train.iter().map(|&i| &pool[i]).collect()).collect();
    let test: Vec<Vec<&EvalGraph>> = splits.iter().map(|s| s.test.iter().map(|&i| &pool[i]).collect()).collect();
    let histories = match paradigm {
        Paradigm::Centralized => {
            let tr: Vec<&EvalGraph> = train.iter().flatten().copied().collect();
            let te: Vec<&EvalGraph> = test.iter().flatten().copied().collect();
            vec![run_centralized(&init, &tr, &te, &cfg.model, &cfg.schedule, keep_trajectory)?]
        }
        Paradigm::Federated => vec![run_federated(&init, &train, &test, &cfg.model, &cfg.schedule, keep_trajectory)?],
        Paradigm::Isolated => run_isolated(&init, &train, &test, &cfg.model, &cfg.schedule)?,
    };
    Ok((splits, histories))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub client: Option<usize>,
    pub best_round: usize,
    pub stopped_round: usize,
    pub early_stopped: bool,
    pub final_metrics: Metrics,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub paradigm: Paradigm,
    pub param_count: usize,
    /// Upload of one client in one round; zero outside federated training.
    pub bytes_per_round: u64,
    pub megabytes_per_round: String,
    pub clients: Vec<ClientSplit>,
    pub runs: Vec<RunEntry>,
}

/// `bytes` in decimal megabytes, two decimals.
pub fn format_megabytes(bytes: u64) -> String {
    format!("{:.2} MB", bytes as f64 / 1e6)
}

/// Trains a paradigm on the stored pool graphs and writes its logs,
/// summary and best checkpoints.
pub fn train(cfg: &RunConfig, paradigm: Paradigm) -> Result<RunSummary> {
    cfg.validate()?;
    let graphs = load_graphs(cfg, pool_cases(cfg))?;
    let pool = eval_graphs(cfg, &graphs)?;
    let (splits, histories) = train_graphs(cfg, paradigm, &pool, false)?;
    let dir = run_dir(cfg, paradigm);
    fs::create_dir_all(&dir)?;
    let mut rounds = format!("{CSV_HEADER}\n");
    let mut timing = String::from("paradigm,client,round,wall_seconds\n");
    let mut runs = Vec::new();
    for h in &histories {
        for r in &h.reports {
            rounds.push_str(&r.csv_row());
            rounds.push('\n');
            let client = r.client.map_or_else(|| "all".to_string(), |c| c.to_string());
            timing.push_str(&format!("{},{client},{},{:.3}\n", paradigm.as_str(), r.round, r.wall_seconds));
        }
        let name = match h.client {
            Some(k) => format!("client_{k}.ckpt"),
            None => "best.ckpt".to_string(),
        };
        write_checkpoint(&dir.join(&name), &h.best_params)?;
        runs.push(RunEntry {
            client: h.client,
            best_round: h.best_round,
            stopped_round: h.stopped_round,
            early_stopped: h.early_stopped,
            final_metrics: h.final_metrics,
            checkpoint: name,
        });
    }
    write_text(&dir.join("rounds.csv"), &rounds)?;
    write_text(&dir.join("timing.csv"), &timing)?;
    let param_count = histories[0].best_params.numel();
    let bytes = if paradigm == Paradigm::Federated {
        bytes_per_round(param_count)
    } else {
        0
    };
    let summary = RunSummary {
        paradigm,
        param_count,
        bytes_per_round: bytes,
        megabytes_per_round: format_megabytes(bytes),
        clients: splits,
        runs,
    };
    write_text(&dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Modality attention of every graph under `params`.
pub fn attention_of(cfg: &RunConfig, params: &ParamStore<f32>, graphs: &[SupervoxelGraph]) -> Result<Vec<ModalityAttention>> {
    graphs
        .par_iter()
        .map(|g| {
            let input: GraphInput<f32> = GraphInput::from_graph(g, &cfg.model)?;
            let (_, captured) = predict_with_attention(params, &cfg.model, &input)?;
            modality_attention(&g.case_id, &captured, input.n_nodes, cfg.model.n_heads, &input.modality)
        })
        .collect()
}

/// Measures modality attention of a checkpoint on the held-out cases and
/// runs the statistics. Writes `explain/attention.csv` and
/// `explain/stats.json`.
pub fn explain(cfg: &RunConfig, checkpoint: &Path) -> Result<(Vec<ModalityAttention>, StatReport)> {
    cfg.validate()?;
    if cfg.explain.held_out_cases < 2 {
        return Err(Error::invalid("held_out_cases", "need at least two held-out cases"));
    }
    let params: ParamStore<f32> = read_checkpoint(checkpoint)?;
    let graphs = load_graphs(cfg, held_out_cases(cfg))?;
    let cases = attention_of(cfg, &params, &graphs)?;
    let report = stat_report(&cases)?;
    let dir = cfg.out_dir.join("explain");
    write_text(&dir.join("attention.csv"), &attention_csv(&cases))?;
    write_text(&dir.join("stats.json"), &to_json(&report))?;
    Ok((cases, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub metrics: Metrics,
    pub best_round: Option<usize>,
    pub stopped_round: Option<usize>,
}

pub const TABLE_HEADER: &str = "paradigm,dice,precision,recall,f1,best_round,stopped_round";

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len() as f64;
    let s = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    Metrics {
        loss: s(|m| m.loss),
        dice: s(|m| m.dice),
        precision: s(|m| m.precision),
        recall: s(|m| m.recall),
        f1: s(|m| m.f1),
    }
}

/// Comparison table over run directories: one row per centralized or
/// federated run, and for an isolated run the client average followed by
/// one row per client. Also returns the per-round curves of the primary
/// models (global rows of federated runs, every row otherwise).
pub fn report_tables(run_dirs: &[PathBuf]) -> Result<(Vec<TableRow>, String)> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("runs", "no run directories given"));
    }
    let mut rows = Vec::new();
    let mut curves = format!("{CSV_HEADER}\n");
    for dir in run_dirs {
        let s: RunSummary = serde_json::from_str(&read_text(&dir.join("summary.json"))?)
            .map_err(|e| Error::format(format!("{}: {e}", dir.join("summary.json").display())))?;
        if s.runs.is_empty() {
            return Err(Error::format(format!("{}: summary lists no runs", dir.display())));
        }
        let row = |label: String, r: &RunEntry| TableRow {
            label,
            metrics: r.final_metrics,
            best_round: Some(r.best_round),
            stopped_round: Some(r.stopped_round),
        };
        match s.paradigm {
            Paradigm::Isolated => {
                let ms: Vec<Metrics> = s.runs.iter().map(|r| r.final_metrics).collect();
                rows.push(TableRow {
                    label: "isolated (mean)".into(),
                    metrics: mean_metrics(&ms),
                    best_round: None,
                    stopped_round: None,
                });
                for r in &s.runs {
                    rows.push(row(format!("isolated client {}", r.client.unwrap_or(0) + 1), r));
                }
            }
            p => rows.push(row(p.as_str().to_string(), &s.runs[0])),
        }
        for line in read_text(&dir.join("rounds.csv"))?.lines().skip(1) {
            let mut f = line.split(',');
            let (paradigm, client) = (f.next().unwrap_or(""), f.next().unwrap_or(""));
            if paradigm != Paradigm::Federated.as_str() || client == "all" {
                curves.push_str(line);
                curves.push('\n');
            }
        }
    }
    Ok((rows, curves))
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
            r.label,
            m.dice,
            m.precision,
            m.recall,
            m.f1,
            opt(r.best_round),
            opt(r.stopped_round)
        ));
    }
    s
}

/// Writes `table.csv` and `curves.csv` into `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<TableRow>> {
    let (rows, curves) = report_tables(run_dirs)?;
    write_text(&out.join("table.csv"), &table_csv(&rows))?;
    write_text(&out.join("curves.csv"), &curves)?;
    Ok(rows)
}
