//! `SVG1` graph files, little-endian throughout.
//!
//! ```text
//! "SVG1"  u32 version=1
//! str case_id                      (u32 byte length + UTF-8)
//! u32 dx, dy, dz
//! f64 prune_threshold
//! u64 mask_voxels
//! u32 n_nodes, n_edges, n_patch_rows, n_features
//! f64 centroids[n_nodes·3]
//! u32 edges[n_edges·2]             (src, dst)
//! f32 patches[n_nodes·n_patch_rows·n_features]
//! u8  labels[n_nodes]
//! u32 voxel_map_len[n_nodes]  then  u32 voxel_map[Σ len]
//! f64 tumor_fraction[n_nodes]
//! ```

use std::path::Path;

use super::SupervoxelGraph;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVG1";
const VERSION: u32 = 1;

impl SupervoxelGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_nodes();
        let mut w = ByteWriter::with_capacity(64 + self.patches.len() * 4 + n * 64);
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.case_id);
        self.dims.iter().for_each(|&d| w.u32(d as u32));
        w.f64(self.prune_threshold);
        w.u64(self.mask_voxels);
        w.u32(n as u32);
        w.u32(self.edges.len() as u32);
        w.u32(self.n_patch_rows as u32);
        w.u32(self.n_features as u32);
        self.centroids.iter().flatten().for_each(|&c| w.f64(c));
        self.edges.iter().flatten().for_each(|&e| w.u32(e));
        self.patches.iter().for_each(|&x| w.f32(x));
        self.labels.iter().for_each(|&l| w.u8(l));
        self.voxel_map.iter().for_each(|m| w.u32(m.len() as u32));
        self.voxel_map.iter().flatten().for_each(|&i| w.u32(i));
        self.tumor_fraction.iter().for_each(|&f| w.f64(f));
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported graph version {version}")));
        }
        let case_id = r.str()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let prune_threshold = r.f64()?;
        let mask_voxels = r.u64()?;
        let n = r.u32()? as usize;
        let n_edges = r.u32()? as usize;
        let n_patch_rows = r.u32()? as usize;
        let n_features = r.u32()? as usize;
        let n_voxels = dims.iter().product::<usize>();
        let centroids = r
            .f64_vec(n.checked_mul(3).ok_or_else(|| Error::format("length overflow"))?)?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let edges: Vec<[u32; 2]> = r
            .u32_vec(n_edges.checked_mul(2).ok_or_else(|| Error::format("length overflow"))?)?
            .chunks_exact(2)
            .map(|e| [e[0], e[1]])
            .collect();
        if edges.iter().flatten().any(|&e| e as usize >= n) {
            return Err(Error::format("edge endpoint out of range"));
        }
        let patch_len = n
            .checked_mul(n_patch_rows)
            .and_then(|x| x.checked_mul(n_features))
            .ok_or_else(|| Error::format("length overflow"))?;
        let patches = r.f32_vec(patch_len)?;
        let labels = r.take(n)?.to_vec();
        let lens = r.u32_vec(n)?;
        let mut voxel_map = Vec::with_capacity(n);
        for &len in &lens {
            let m = r.u32_vec(len as usize)?;
            if m.iter().any(|&i| i as usize >= n_voxels) {
                return Err(Error::format("voxel index out of range"));
            }
            voxel_map.push(m);
        }
        let tumor_fraction = r.f64_vec(n)?;
        r.finish()?;
        Ok(Self {
            case_id,
            dims,
            prune_threshold,
            mask_voxels,
            centroids,
            edges,
            n_patch_rows,
            n_features,
            patches,
            labels,
            voxel_map,
            tumor_fraction,
        })
    }
}

pub fn write_graph(g: &SupervoxelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, g.to_bytes())?;
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<SupervoxelGraph> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    SupervoxelGraph::from_bytes(&std::fs::read(path)?)
}
