//! 3D SLIC on a single normalized intensity channel.

use super::{Labeling, PRUNED};
use crate::error::{Error, Result};
use crate::volume::voxel_coords;

/// Raw SLIC output plus the grid step it was run with.
#[derive(Clone, Debug)]
pub struct SlicResult {
    pub labeling: Labeling,
    /// Grid step `S = (n_voxels / K)^(1/3)`.
    pub step: f64,
}

#[derive(Clone, Copy, Debug)]
struct Center {
    pos: [f64; 3],
    intensity: f64,
}

fn gradient(channel: &[f32], dims: [usize; 3], c: [usize; 3]) -> f64 {
    let at = |p: [usize; 3]| channel[p[0] + dims[0] * (p[1] + dims[1] * p[2])] as f64;
    (0..3)
        .map(|a| {
            let mut lo = c;
            let mut hi = c;
            lo[a] = c[a].saturating_sub(1);
            hi[a] = (c[a] + 1).min(dims[a] - 1);
            let d = at(hi) - at(lo);
            d * d
        })
        .sum()
}

/// Clusters voxels by `D = sqrt(d_int² + (m/S)²·d_sp²)`.
///
/// Centers start at the cell midpoints of a regular grid of spacing close to
/// `S`. When `S ≥ 3` a center jumps to the lowest-gradient voxel of the 3×3×3
/// neighborhood around its nearest voxel if that beats the nearest voxel
/// itself (smaller cells would let neighboring centers collide). Each assignment pass
/// only scans a window of half-width `S` around every center. Voxels no
/// window reached after the last pass go to the nearest center overall.
pub fn slic3d(
    channel: &[f32],
    dims: [usize; 3],
    k: usize,
    compactness: f64,
    iters: usize,
) -> Result<SlicResult> {
    let n: usize = dims.iter().product();
    if channel.len() != n {
        return Err(Error::shape(format!(
            "channel has {} voxels, dims give {n}",
            channel.len()
        )));
    }
    if k < 8 {
        return Err(Error::invalid("k_supervoxels", "must be at least 8"));
    }
    if k > n {
        return Err(Error::invalid(
            "k_supervoxels",
            format!("{k} exceeds the voxel count {n}"),
        ));
    }
    let step = (n as f64 / k as f64).cbrt();
    let grid = dims.map(|d| ((d as f64 / step).round() as usize).clamp(1, d));
    let cell = [0, 1, 2].map(|a| dims[a] as f64 / grid[a] as f64);

    let mut centers = Vec::with_capacity(grid.iter().product());
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                let g = [gx, gy, gz];
                let ideal = [0, 1, 2].map(|a| (g[a] as f64 + 0.5) * cell[a] - 0.5);
                let base = [0, 1, 2].map(|a| (ideal[a].round() as usize).min(dims[a] - 1));
                let mut moved = None;
                if step >= 3.0 {
                    let mut best = gradient(channel, dims, base);
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let q = [dx, dy, dz];
                                let c = [0, 1, 2].map(|a| base[a] as i64 + q[a]);
                                if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as i64) {
                                    continue;
                                }
                                let c = c.map(|v| v as usize);
                                let gr = gradient(channel, dims, c);
                                if gr < best {
                                    best = gr;
                                    moved = Some(c);
                                }
                            }
                        }
                    }
                }
                let (pos, p) = match moved {
                    Some(c) => (c.map(|v| v as f64), c),
                    None => (ideal, base),
                };
                centers.push(Center {
                    pos,
                    intensity: channel[p[0] + dims[0] * (p[1] + dims[1] * p[2])] as f64,
                });
            }
        }
    }

    let spatial = (compactness / step).powi(2);
    let radius = step.ceil() as i64;
    let mut label = vec![PRUNED; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..iters.max(1) {
        label.iter_mut().for_each(|l| *l = PRUNED);
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let lo = [0, 1, 2].map(|a| (c.pos[a].round() as i64 - radius).max(0) as usize);
            let hi = [0, 1, 2]
                .map(|a| (c.pos[a].round() as i64 + radius).min(dims[a] as i64 - 1) as usize);
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let i = x + dims[0] * (y + dims[1] * z);
                        let di = channel[i] as f64 - c.intensity;
                        let ds = (x as f64 - c.pos[0]).powi(2)
                            + (y as f64 - c.pos[1]).powi(2)
                            + (z as f64 - c.pos[2]).powi(2);
                        let d = di * di + spatial * ds;
                        if d < dist[i] {
                            dist[i] = d;
                            label[i] = ci as u32;
                        }
                    }
                }
            }
        }
        let mut acc = vec![[0f64; 5]; centers.len()];
        for i in 0..n {
            if label[i] == PRUNED {
                continue;
            }
            let p = voxel_coords(dims, i);
            let a = &mut acc[label[i] as usize];
            a[0] += p[0] as f64;
            a[1] += p[1] as f64;
            a[2] += p[2] as f64;
            a[3] += channel[i] as f64;
            a[4] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[4] > 0.0 {
                c.pos = [a[0] / a[4], a[1] / a[4], a[2] / a[4]];
                c.intensity = a[3] / a[4];
            }
        }
    }
    for i in 0..n {
        if label[i] != PRUNED {
            continue;
        }
        let p = voxel_coords(dims, i);
        let mut best = (f64::INFINITY, 0u32);
        for (ci, c) in centers.iter().enumerate() {
            let di = channel[i] as f64 - c.intensity;
            let ds = (0..3).map(|a| (p[a] as f64 - c.pos[a]).powi(2)).sum::<f64>();
            let d = di * di + spatial * ds;
            if d < best.0 {
                best = (d, ci as u32);
            }
        }
        label[i] = best.1;
    }
    Ok(SlicResult {
        labeling: Labeling {
            dims,
            label_of: label,
            n_labels: centers.len(),
        },
        step,
    })
}
