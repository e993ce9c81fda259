use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{evaluate, GraphInput, ModelConfig};
use crate::supervoxel::SupervoxelGraph;
use crate::tensor::ParamStore;

/// A graph prepared for training and voxel-level scoring.
#[derive(Clone, Debug)]
pub struct EvalGraph {
    pub case_id: String,
    pub input: GraphInput<f32>,
    /// Member voxels of each node.
    pub node_sizes: Vec<u64>,
    /// Member voxels of each node inside the tumor mask.
    pub node_tumor: Vec<u64>,
    /// Tumor voxels in the whole volume.
    pub mask_voxels: u64,
}

impl EvalGraph {
    pub fn from_graph(g: &SupervoxelGraph, cfg: &ModelConfig) -> Result<Self> {
        let node_sizes: Vec<u64> = g.voxel_map.iter().map(|m| m.len() as u64).collect();
        let node_tumor = node_sizes
            .iter()
            .zip(&g.tumor_fraction)
            .map(|(&s, &f)| (f * s as f64).round() as u64)
            .collect();
        Ok(Self {
            case_id: g.case_id.clone(),
            input: GraphInput::from_graph(g, cfg)?,
            node_sizes,
            node_tumor,
            mask_voxels: g.mask_voxels,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `2|P∩G| / (|P| + |G|)`, with an empty prediction of an empty mask
/// scoring 1.
pub fn voxel_dice(intersection: u64, predicted: u64, truth: u64) -> f64 {
    if predicted + truth == 0 {
        return 1.0;
    }
    2.0 * intersection as f64 / (predicted + truth) as f64
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Per-case outcome of an evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphScore {
    pub loss: f64,
    pub dice: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Scores every graph in evaluation mode. A node is predicted positive when
/// its probability is at least one half, i.e. its logit is non-negative.
pub fn score_graphs(params: &ParamStore<f32>, cfg: &ModelConfig, graphs: &[&EvalGraph]) -> Result<Vec<GraphScore>> {
    graphs
        .par_iter()
        .map(|g| {
            let (logits, loss) = evaluate(params, cfg, &g.input)?;
            let mut s = GraphScore {
                loss,
                ..GraphScore::default()
            };
            let (mut inter, mut pred) = (0u64, 0u64);
            for (i, &z) in logits.iter().enumerate() {
                let p = z >= 0.0;
                match (p, g.input.labels[i] == 1) {
                    (true, true) => s.tp += 1,
                    (true, false) => s.fp += 1,
                    (false, true) => s.fn_ += 1,
                    _ => {}
                }
                if p {
                    inter += g.node_tumor[i];
                    pred += g.node_sizes[i];
                }
            }
            s.dice = voxel_dice(inter, pred, g.mask_voxels);
            Ok(s)
        })
        .collect()
}

/// Mean loss and voxel Dice over cases; node precision, recall and F1 over
/// the pooled nodes. With no positive nodes and no positive predictions,
/// precision and recall are 1.
pub fn combine(scores: &[GraphScore]) -> Metrics {
    if scores.is_empty() {
        return Metrics::default();
    }
    let n = scores.len() as f64;
    let (tp, fp, fn_) = scores
        .iter()
        .fold((0, 0, 0), |a, s| (a.0 + s.tp, a.1 + s.fp, a.2 + s.fn_));
    let empty = if tp + fp + fn_ == 0 { 1.0 } else { 0.0 };
    let precision = ratio(tp, tp + fp, empty);
    let recall = ratio(tp, tp + fn_, empty);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        loss: scores.iter().map(|s| s.loss).sum::<f64>() / n,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        precision,
        recall,
        f1,
    }
}

pub fn eval_metrics(params: &ParamStore<f32>, cfg: &ModelConfig, graphs: &[&EvalGraph]) -> Result<Metrics> {
    Ok(combine(&score_graphs(params, cfg, graphs)?))
}
