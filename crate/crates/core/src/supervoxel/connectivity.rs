use std::collections::{BTreeSet, VecDeque};

use super::{Labeling, PRUNED};

fn neighbors(dims: [usize; 3], i: usize) -> impl Iterator<Item = usize> {
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

/// Splits labels into 6-connected components, numbered in scan order of
/// their first voxel. Pruned voxels get `PRUNED`.
pub(crate) fn components(l: &Labeling) -> (Vec<u32>, usize) {
    let n = l.label_of.len();
    let mut comp = vec![PRUNED; n];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != PRUNED || l.label_of[start] == PRUNED {
            continue;
        }
        let lab = l.label_of[start];
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbors(l.dims, i) {
                if comp[j] == PRUNED && l.label_of[j] == lab {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    (comp, next as usize)
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Makes every label 6-connected.
///
/// Each disconnected piece of a label becomes its own label. Pieces smaller
/// than `min_size` voxels are merged, in scan order, into the largest
/// 6-adjacent piece (ties to the lower id). Ids are then compacted in order
/// of first appearance.
pub fn enforce_connectivity(l: &Labeling, min_size: usize) -> Labeling {
    let (comp, n_comp) = components(l);
    let mut size = vec![0usize; n_comp];
    for &c in &comp {
        if c != PRUNED {
            size[c as usize] += 1;
        }
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_comp];
    for i in 0..comp.len() {
        if comp[i] == PRUNED {
            continue;
        }
        for j in neighbors(l.dims, i) {
            if j > i && comp[j] != PRUNED && comp[j] != comp[i] {
                adj[comp[i] as usize].insert(comp[j] as usize);
                adj[comp[j] as usize].insert(comp[i] as usize);
            }
        }
    }
    let mut parent: Vec<usize> = (0..n_comp).collect();
    for c in 0..n_comp {
        let root = find(&mut parent, c);
        if size[root] >= min_size {
            continue;
        }
        let candidates: BTreeSet<usize> = adj[root]
            .iter()
            .map(|&a| find(&mut parent, a))
            .filter(|&a| a != root)
            .collect();
        let Some(target) = candidates
            .iter()
            .copied()
            .max_by(|&a, &b| size[a].cmp(&size[b]).then(b.cmp(&a)))
        else {
            continue;
        };
        parent[root] = target;
        size[target] += size[root];
        let moved = std::mem::take(&mut adj[root]);
        adj[target].extend(moved);
    }
    let mut remap = vec![PRUNED; n_comp];
    let mut next = 0u32;
    let label_of = comp
        .iter()
        .map(|&c| {
            if c == PRUNED {
                return PRUNED;
            }
            let r = find(&mut parent, c as usize);
            if remap[r] == PRUNED {
                remap[r] = next;
                next += 1;
            }
            remap[r]
        })
        .collect();
    Labeling {
        dims: l.dims,
        label_of,
        n_labels: next as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent audit: depth-first fill per label counts pieces.
    fn pieces_per_label(l: &Labeling) -> Vec<usize> {
        let [nx, ny, nz] = l.dims;
        let n = nx * ny * nz;
        let mut seen = vec![false; n];
        let mut pieces = vec![0usize; l.n_labels];
        for s in 0..n {
            if seen[s] || l.label_of[s] == PRUNED {
                continue;
            }
            pieces[l.label_of[s] as usize] += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
                let mut cand = vec![];
                if x > 0 {
                    cand.push(i - 1)
                }
                if x + 1 < nx {
                    cand.push(i + 1)
                }
                if y > 0 {
                    cand.push(i - nx)
                }
                if y + 1 < ny {
                    cand.push(i + nx)
                }
                if z > 0 {
                    cand.push(i - nx * ny)
                }
                if z + 1 < nz {
                    cand.push(i + nx * ny)
                }
                for j in cand {
                    if !seen[j] && l.label_of[j] == l.label_of[i] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pieces
    }

    #[test]
    fn random_labeling_becomes_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for min_size in [0, 3, 10] {
            let l = Labeling {
                dims: [8, 8, 8],
                label_of: (0..512).map(|_| rng.gen_range(0..6)).collect(),
                n_labels: 6,
            };
            let out = enforce_connectivity(&l, min_size);
            let pieces = pieces_per_label(&out);
            assert!(pieces.iter().all(|&p| p == 1), "{pieces:?}");
            assert!(out.label_of.iter().all(|&v| (v as usize) < out.n_labels));
            let mut sizes = vec![0; out.n_labels];
            out.label_of.iter().for_each(|&v| sizes[v as usize] += 1);
            if min_size > 0 {
                assert!(sizes.iter().all(|&s| s >= min_size));
            }
        }
    }

    #[test]
    fn connected_labeling_is_a_fixpoint_up_to_compaction() {
        let label_of: Vec<u32> = (0..64u32).map(|i| if i % 4 < 2 { 7 } else { 3 }).collect();
        let l = Labeling {
            dims: [4, 4, 4],
            label_of,
            n_labels: 8,
        };
        let out = enforce_connectivity(&l, 1);
        assert_eq!(out.n_labels, 2);
        for i in 0..64 {
            let expect = if i % 4 < 2 { 0 } else { 1 };
            assert_eq!(out.label_of[i], expect);
        }
    }

    #[test]
    fn stray_voxel_joins_surrounding_label() {
        let mut label_of = vec![1u32; 27];
        label_of[13] = 0;
        let l = Labeling {
            dims: [3, 3, 3],
            label_of,
            n_labels: 2,
        };
        let out = enforce_connectivity(&l, 2);
        assert_eq!(out.n_labels, 1);
        assert!(out.label_of.iter().all(|&v| v == 0));
    }
}
