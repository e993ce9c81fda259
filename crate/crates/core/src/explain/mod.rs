//! Per-modality CLS attention and the statistics used to test for a
//! modality preference across Transformer layers.

mod stats;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CapturedAttention;
use crate::volume::N_MODALITIES;

pub use stats::{
    bonferroni, cohens_d_paired, f_cdf, f_sf, layer_correlations, one_way_anova, paired_ttest, pearson,
    stat_report, t_cdf, trend_test, Anova, LayerCorrelations, LayerStats, PairedTest, StatReport, Trend,
};

pub const MODALITY_NAMES: [&str; N_MODALITIES] = ["T1", "T1ce", "T2", "FLAIR"];

/// Head- and node-averaged CLS attention per modality, one row per
/// embedder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAttention {
    pub case_id: String,
    pub layers: Vec<[f64; N_MODALITIES]>,
}

impl ModalityAttention {
    /// `mean(T2, FLAIR) − mean(T1, T1ce)` at `layer`.
    pub fn delta(&self, layer: usize) -> f64 {
        let m = &self.layers[layer];
        0.5 * (m[2] + m[3]) - 0.5 * (m[0] + m[1])
    }
}

/// Attention of one node at one layer, `rows` laid out `[H, T]` with the CLS
/// column first and patch `j` at column `j + 1`. Each modality gets the mean
/// over its patches, averaged over heads. CLS self-attention is left out.
pub fn node_modality_attention(rows: &[f32], n_heads: usize, modality: &[usize]) -> Result<[f64; N_MODALITIES]> {
    let tokens = modality.len() + 1;
    if n_heads == 0 || rows.len() != n_heads * tokens {
        return Err(Error::shape(format!(
            "attention block of {} values does not cover {n_heads} heads x {tokens} tokens",
            rows.len()
        )));
    }
    let mut count = [0usize; N_MODALITIES];
    for &m in modality {
        if m >= N_MODALITIES {
            return Err(Error::shape(format!("modality index {m} out of range")));
        }
        count[m] += 1;
    }
    if let Some(m) = count.iter().position(|&c| c == 0) {
        return Err(Error::shape(format!("no patches for modality {}", MODALITY_NAMES[m])));
    }
    let mut sums = [0f64; N_MODALITIES];
    for row in rows.chunks_exact(tokens) {
        for (j, &m) in modality.iter().enumerate() {
            sums[m] += row[j + 1] as f64;
        }
    }
    let mut out = [0f64; N_MODALITIES];
    for m in 0..N_MODALITIES {
        out[m] = sums[m] / (count[m] * n_heads) as f64;
    }
    Ok(out)
}

/// Per-layer modality attention of a whole case: per node as above, then the
/// unweighted mean over nodes.
pub fn modality_attention(
    case_id: &str,
    captured: &CapturedAttention,
    n_nodes: usize,
    n_heads: usize,
    modality: &[usize],
) -> Result<ModalityAttention> {
    if captured.is_empty() {
        return Err(Error::shape("no attention layers were captured".to_string()));
    }
    if n_nodes == 0 {
        return Err(Error::shape("case has no nodes".to_string()));
    }
    let block = n_heads * (modality.len() + 1);
    let mut layers = Vec::with_capacity(captured.len());
    for (l, rows) in captured.iter().enumerate() {
        if rows.len() != n_nodes * block {
            return Err(Error::shape(format!(
                "layer {l} holds {} values, expected {} nodes x {block}",
                rows.len(),
                n_nodes
            )));
        }
        let mut acc = [0f64; N_MODALITIES];
        for node in rows.chunks_exact(block) {
            let m = node_modality_attention(node, n_heads, modality)?;
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
        }
        layers.push(acc.map(|a| a / n_nodes as f64));
    }
    Ok(ModalityAttention {
        case_id: case_id.to_string(),
        layers,
    })
}

pub const ATTENTION_CSV_HEADER: &str = "case_id,layer,T1,T1ce,T2,FLAIR,delta";

/// One CSV row per case and layer.
pub fn attention_csv(cases: &[ModalityAttention]) -> String {
    let mut s = String::from(ATTENTION_CSV_HEADER);
    s.push('\n');
    for c in cases {
        for (l, m) in c.layers.iter().enumerate() {
            s.push_str(&format!(
                "{},{l},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                c.case_id,
                m[0],
                m[1],
                m[2],
                m[3],
                c.delta(l)
            ));
        }
    }
    s
}
