//! Volume to supervoxel graph.
//!
//! The pipeline runs SLIC on the T1 channel, enforces 6-connectivity, drops
//! background supervoxels by the largest gap in mean T1, links the remaining
//! ones to their nearest centroids, and summarizes each as a stack of
//! multimodal intensity patches with a tumor label.

mod connectivity;
mod io;
mod knn;
mod patches;
mod prune;
mod slic;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, N_MODALITIES};

pub use connectivity::enforce_connectivity;
pub use io::{read_graph, write_graph};
pub use knn::{centroids, knn_edges, symmetrize};
pub use patches::{kmeanspp_seed, node_patches};
pub use prune::{label_means, largest_gap_split, prune_background};
pub use slic::{slic3d, SlicResult};

/// Label of voxels that belong to no supervoxel.
pub const PRUNED: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    pub dims: [usize; 3],
    pub label_of: Vec<u32>,
    pub n_labels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k_supervoxels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub knn_k: usize,
    pub patches_per_modality: usize,
    pub patch_neighbors: usize,
    pub tau: f64,
    /// Label with `fraction > tau` instead of `>=`.
    pub strict_tau: bool,
    pub symmetrize: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_supervoxels: 200,
            compactness: 10.0,
            slic_iters: 10,
            knn_k: 8,
            patches_per_modality: 90,
            patch_neighbors: 45,
            tau: 0.2,
            strict_tau: false,
            symmetrize: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_supervoxels < 8 {
            return Err(Error::invalid("k_supervoxels", "must be at least 8"));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::invalid("compactness", "must be positive"));
        }
        if self.knn_k == 0 {
            return Err(Error::invalid("knn_k", "must be positive"));
        }
        if self.patches_per_modality == 0 {
            return Err(Error::invalid("patches_per_modality", "must be positive"));
        }
        if self.patch_neighbors == 0 {
            return Err(Error::invalid("patch_neighbors", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("tau", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_patch_rows(&self) -> usize {
        self.patches_per_modality * N_MODALITIES
    }

    pub fn n_features(&self) -> usize {
        self.patch_neighbors + 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelGraph {
    pub case_id: String,
    pub dims: [usize; 3],
    pub prune_threshold: f64,
    /// Tumor voxels in the whole volume, pruned regions included.
    pub mask_voxels: u64,
    pub centroids: Vec<[f64; 3]>,
    pub edges: Vec<[u32; 2]>,
    pub n_patch_rows: usize,
    pub n_features: usize,
    /// Row-major `[n_nodes, n_patch_rows, n_features]`.
    pub patches: Vec<f32>,
    pub labels: Vec<u8>,
    pub voxel_map: Vec<Vec<u32>>,
    pub tumor_fraction: Vec<f64>,
}

impl SupervoxelGraph {
    pub fn n_nodes(&self) -> usize {
        self.centroids.len()
    }

    pub fn node_patch(&self, i: usize) -> &[f32] {
        let w = self.n_patch_rows * self.n_features;
        &self.patches[i * w..(i + 1) * w]
    }

    /// Tumor voxels covered by nodes with label 1.
    pub fn labeled_tumor_voxels(&self, mask: &[u8]) -> u64 {
        self.voxel_map
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == 1)
            .flat_map(|(vm, _)| vm.iter())
            .filter(|&&i| mask[i as usize] == 1)
            .count() as u64
    }
}

/// Member voxel indices (ascending) of each retained label.
pub fn members_of(l: &Labeling, retained: &[u32]) -> Vec<Vec<u32>> {
    let mut node_of = vec![usize::MAX; l.n_labels];
    for (k, &r) in retained.iter().enumerate() {
        node_of[r as usize] = k;
    }
    let mut out = vec![Vec::new(); retained.len()];
    for (i, &lab) in l.label_of.iter().enumerate() {
        if lab != PRUNED && node_of[lab as usize] != usize::MAX {
            out[node_of[lab as usize]].push(i as u32);
        }
    }
    out
}

/// Tumor fraction of each member list and the thresholded labels.
pub fn assign_labels(members: &[Vec<u32>], mask: &[u8], tau: f64, strict: bool) -> (Vec<u8>, Vec<f64>) {
    let fraction: Vec<f64> = members
        .iter()
        .map(|m| {
            if m.is_empty() {
                return 0.0;
            }
            let hits = m.iter().filter(|&&i| mask[i as usize] == 1).count();
            hits as f64 / m.len() as f64
        })
        .collect();
    let labels = fraction
        .iter()
        .map(|&f| u8::from(if strict { f > tau } else { f >= tau }))
        .collect();
    (labels, fraction)
}

/// Full pipeline for one volume. Deterministic in `(v, cfg, seed)`.
pub fn build_supervoxel_graph(v: &Volume, cfg: &GraphConfig, seed: u64) -> Result<SupervoxelGraph> {
    cfg.validate()?;
    let t1 = &v.channels[0];
    let slic = slic3d(t1, v.dims, cfg.k_supervoxels, cfg.compactness, cfg.slic_iters)?;
    let min_size = (slic.step.powi(3) / 4.0).floor() as usize;
    let labeling = enforce_connectivity(&slic.labeling, min_size);
    let (retained, threshold) = prune_background(&labeling, t1)?;
    let cents = centroids(&labeling, &retained);
    let mut edges = knn_edges(&cents, cfg.knn_k)?;
    if cfg.symmetrize {
        edges = symmetrize(&edges);
    }
    let members = members_of(&labeling, &retained);
    let patches: Vec<Vec<f32>> = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            node_patches(v, m, cfg.patches_per_modality, cfg.patch_neighbors, seed, i as u64)
        })
        .collect::<Result<_>>()?;
    let (labels, tumor_fraction) = assign_labels(&members, &v.mask, cfg.tau, cfg.strict_tau);
    Ok(SupervoxelGraph {
        case_id: v.case_id.clone(),
        dims: v.dims,
        prune_threshold: threshold,
        mask_voxels: v.mask.iter().filter(|&&m| m == 1).count() as u64,
        centroids: cents,
        edges,
        n_patch_rows: cfg.n_patch_rows(),
        n_features: cfg.n_features(),
        patches: patches.concat(),
        labels,
        voxel_map: members,
        tumor_fraction,
    })
}

/// Builds graphs for many volumes in parallel. Volume `i` uses the patch
/// seed `seed ^ i`.
pub fn build_graphs(vols: &[Volume], cfg: &GraphConfig, seed: u64) -> Result<Vec<SupervoxelGraph>> {
    vols.par_iter()
        .enumerate()
        .map(|(i, v)| build_supervoxel_graph(v, cfg, seed ^ i as u64))
        .collect()
}

#[cfg(test)]
mod tests;
