use super::{Labeling, PRUNED};
use crate::error::{Error, Result};
use crate::volume::voxel_coords;

/// Mean voxel coordinate of each retained label, in `retained` order.
pub fn centroids(l: &Labeling, retained: &[u32]) -> Vec<[f64; 3]> {
    let mut node_of = vec![usize::MAX; l.n_labels];
    for (k, &r) in retained.iter().enumerate() {
        node_of[r as usize] = k;
    }
    let mut acc = vec![[0f64; 4]; retained.len()];
    for (i, &lab) in l.label_of.iter().enumerate() {
        if lab == PRUNED || node_of[lab as usize] == usize::MAX {
            continue;
        }
        let p = voxel_coords(l.dims, i);
        let a = &mut acc[node_of[lab as usize]];
        a[0] += p[0] as f64;
        a[1] += p[1] as f64;
        a[2] += p[2] as f64;
        a[3] += 1.0;
    }
    acc.iter()
        .map(|a| [a[0] / a[3], a[1] / a[3], a[2] / a[3]])
        .collect()
}

/// Directed edges from every node to its `k` nearest other nodes (all
/// others when fewer exist). Ties break toward the lower node id.
pub fn knn_edges(points: &[[f64; 3]], k: usize) -> Result<Vec<[u32; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("graph", format!("need at least 2 nodes, got {n}")));
    }
    let take = k.min(n - 1);
    let mut edges = Vec::with_capacity(n * take);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        cand.clear();
        cand.extend(points.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            (d, j)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < cand.len() {
            cand.select_nth_unstable_by(take, cmp);
            cand.truncate(take);
        }
        cand.sort_by(cmp);
        edges.extend(cand.iter().map(|&(_, j)| [i as u32, j as u32]));
    }
    Ok(edges)
}

/// Adds the reverse of every edge that lacks one, keeping order stable.
pub fn symmetrize(edges: &[[u32; 2]]) -> Vec<[u32; 2]> {
    let set: std::collections::HashSet<[u32; 2]> = edges.iter().copied().collect();
    let mut out = edges.to_vec();
    for e in edges {
        let r = [e[1], e[0]];
        if !set.contains(&r) && !out[edges.len()..].contains(&r) {
            out.push(r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nine_collinear_points_give_complete_digraph() {
        let pts: Vec<[f64; 3]> = (0..9).map(|i| [i as f64, 0.0, 0.0]).collect();
        let e = knn_edges(&pts, 8).unwrap();
        assert_eq!(e.len(), 72);
        assert!(e.iter().all(|e| e[0] != e[1]));
    }

    #[test]
    fn three_nodes_clamp_k() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 5.0, 0.0]];
        assert_eq!(knn_edges(&pts, 8).unwrap().len(), 6);
    }

    #[test]
    fn single_node_is_an_error() {
        assert!(knn_edges(&[[0.0; 3]], 8).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // integer grid points create plenty of distance ties
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| [0; 3].map(|_| rng.gen_range(0..6) as f64))
            .collect();
        let got = knn_edges(&pts, 8).unwrap();
        let mut expect = Vec::new();
        for i in 0..50 {
            let mut all: Vec<(i64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum();
                    (d as i64, j)
                })
                .collect();
            all.sort();
            expect.extend(all[..8].iter().map(|&(_, j)| [i as u32, j as u32]));
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn symmetrize_adds_missing_reverse_edges() {
        let e = symmetrize(&[[0, 1], [1, 0], [0, 2]]);
        assert_eq!(e, vec![[0, 1], [1, 0], [0, 2], [2, 0]]);
    }
}
