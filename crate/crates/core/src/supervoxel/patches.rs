use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::volume::{voxel_coords, Volume, N_MODALITIES};

/// k-means++ seeding over `points`, returning indices into `points`.
///
/// The first pick is uniform, later picks are drawn with probability
/// proportional to the squared distance to the nearest pick so far. Once every
/// remaining point sits on a pick (always the case after `points.len()` picks
/// of distinct points) the picks made so far are repeated cyclically.
pub fn kmeanspp_seed<R: Rng>(points: &[[f64; 3]], p: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 {
        return Err(Error::invalid("patches_per_modality", "must be positive"));
    }
    if points.is_empty() {
        return Err(Error::invalid("points", "empty point set"));
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut picks = Vec::with_capacity(p);
    picks.push(rng.gen_range(0..points.len()));
    let mut nearest: Vec<f64> = points.iter().map(|q| d2(q, &points[picks[0]])).collect();
    while picks.len() < p {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in nearest.iter().enumerate() {
            if w > 0.0 {
                chosen = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let c = chosen.expect("positive total implies a positive weight");
        picks.push(c);
        for (w, q) in nearest.iter_mut().zip(points) {
            *w = w.min(d2(q, &points[c]));
        }
    }
    let distinct = picks.len();
    for i in distinct..p {
        picks.push(picks[i % distinct]);
    }
    Ok(picks)
}

/// Indices (into `members`) of the `count` members nearest to `center`,
/// ordered by distance then voxel index, padded with the nearest one.
fn nearest_members(members: &[u32], coords: &[[f64; 3]], center: [f64; 3], count: usize) -> Vec<usize> {
    let mut order: Vec<(f64, u32, usize)> = coords
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let d = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum::<f64>();
            (d, members[j], j)
        })
        .collect();
    let cmp = |a: &(f64, u32, usize), b: &(f64, u32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if count < order.len() {
        order.select_nth_unstable_by(count, cmp);
        order.truncate(count);
    }
    order.sort_by(cmp);
    let mut out: Vec<usize> = order.iter().map(|o| o.2).collect();
    let first = out[0];
    out.resize(count, first);
    out
}

/// Feature tensor for one node, row-major `[P·4, nbr+3]`.
///
/// Row `m·P + p` holds the `nbr` intensities of modality `m` around patch
/// centroid `p`, then that centroid divided by the volume dims. `members`
/// must be sorted ascending.
pub fn node_patches(
    v: &Volume,
    members: &[u32],
    p: usize,
    nbr: usize,
    seed: u64,
    node: u64,
) -> Result<Vec<f32>> {
    if members.is_empty() {
        return Err(Error::invalid("supervoxel", "empty supervoxel"));
    }
    if nbr == 0 {
        return Err(Error::invalid("patch_neighbors", "must be positive"));
    }
    let coords: Vec<[f64; 3]> = members
        .iter()
        .map(|&i| voxel_coords(v.dims, i as usize).map(|c| c as f64))
        .collect();
    let mut rng = substream(seed, &[node]);
    let centers = kmeanspp_seed(&coords, p, &mut rng)?;
    let width = nbr + 3;
    let mut out = vec![0f32; N_MODALITIES * p * width];
    for (pi, &c) in centers.iter().enumerate() {
        let near = nearest_members(members, &coords, coords[c], nbr);
        let norm = [0, 1, 2].map(|a| (coords[c][a] / v.dims[a] as f64) as f32);
        for m in 0..N_MODALITIES {
            let row = &mut out[(m * p + pi) * width..][..width];
            for (slot, &j) in row.iter_mut().zip(&near) {
                *slot = v.channels[m][members[j] as usize];
            }
            row[nbr..].copy_from_slice(&norm);
        }
    }
    Ok(out)
}
