use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Spectral positional encoding of a graph.
#[derive(Clone, Debug)]
pub struct LaplacianPe {
    pub n_nodes: usize,
    pub k: usize,
    /// Row-major `[n_nodes, k]`.
    pub vectors: Vec<f64>,
    /// Eigenvalue of each column; zero for padding columns.
    pub eigenvalues: Vec<f64>,
}

/// Symmetric normalized Laplacian `I − D^{-1/2} A D^{-1/2}` of the
/// undirected version of `edges`. Isolated nodes get an all-zero row.
pub fn normalized_laplacian(edges: &[[u32; 2]], n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for e in edges {
        let (i, j) = (e[0] as usize, e[1] as usize);
        if i != j {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if deg[i] == 0.0 || deg[j] == 0.0 {
            return 0.0;
        }
        let off = -a[(i, j)] / (deg[i] * deg[j]).sqrt();
        if i == j {
            1.0 + off
        } else {
            off
        }
    })
}

fn component_count(edges: &[[u32; 2]], n: usize) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    let mut count = n;
    for e in edges {
        let (a, b) = (find(&mut parent, e[0] as usize), find(&mut parent, e[1] as usize));
        if a != b {
            parent[a] = b;
            count -= 1;
        }
    }
    count
}

/// Eigenvectors of the `k` smallest eigenvalues after the zero eigenvalues
/// owed to connected components (one per component, isolated nodes
/// included). Each vector's largest-magnitude entry is made positive.
/// Missing columns, when the spectrum runs out, are zero.
pub fn laplacian_pe(edges: &[[u32; 2]], n: usize, k: usize) -> Result<LaplacianPe> {
    if n <= k {
        return Err(Error::invalid(
            "pe_dim",
            format!("graph has {n} nodes, need more than {k}"),
        ));
    }
    if edges.iter().flatten().any(|&e| e as usize >= n) {
        return Err(Error::shape("edge endpoint out of range"));
    }
    let lap = normalized_laplacian(edges, n);
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let skip = component_count(edges, n);
    let mut deg = vec![0usize; n];
    for e in edges {
        if e[0] != e[1] {
            deg[e[0] as usize] += 1;
            deg[e[1] as usize] += 1;
        }
    }
    let mut vectors = vec![0.0; n * k];
    let mut eigenvalues = vec![0.0; k];
    for (col, &idx) in order.iter().skip(skip).take(k).enumerate() {
        eigenvalues[col] = eig.eigenvalues[idx];
        let v = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[i * k + col] = if deg[i] == 0 { 0.0 } else { sign * v[i] };
        }
    }
    Ok(LaplacianPe {
        n_nodes: n,
        k,
        vectors,
        eigenvalues,
    })
}

impl LaplacianPe {
    /// Copy with column `j` multiplied by `signs[j]`.
    pub fn with_signs(&self, signs: &[f64]) -> Vec<f64> {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, &v)| v * signs[i % self.k])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, p: f64, seed: u64) -> Vec<[u32; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Vec::new();
        for i in 0..n as u32 {
            for j in 0..n as u32 {
                if i != j && rng.gen::<f64>() < p {
                    e.push([i, j]);
                }
            }
        }
        e
    }

    #[test]
    fn spectrum_lies_in_zero_two() {
        let e = random_graph(25, 0.15, 1);
        let eig = SymmetricEigen::new(normalized_laplacian(&e, 25));
        assert!(eig.eigenvalues.iter().all(|&l| (-1e-10..=2.0 + 1e-10).contains(&l)));
    }

    #[test]
    fn path_graph_has_constant_direction_null_vector() {
        let e = [[0, 1], [1, 2], [2, 3]];
        let eig = SymmetricEigen::new(normalized_laplacian(&e, 4));
        let (imin, &lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!(lmin.abs() < 1e-12);
        // null vector is proportional to sqrt(degree)
        let v = eig.eigenvectors.column(imin);
        let d = [1.0f64, 2.0, 2.0, 1.0].map(f64::sqrt);
        let ratio: Vec<f64> = (0..4).map(|i| v[i] / d[i]).collect();
        assert!(ratio.iter().all(|r| (r - ratio[0]).abs() < 1e-10));
    }

    #[test]
    fn random_graph_vectors_are_orthonormal_eigenvectors() {
        let n = 30;
        let e = random_graph(n, 0.12, 7);
        let pe = laplacian_pe(&e, n, 8).unwrap();
        let lap = normalized_laplacian(&e, n);
        for a in 0..8 {
            let va = DMatrix::from_fn(n, 1, |i, _| pe.vectors[i * 8 + a]);
            let resid = &lap * &va - &va * pe.eigenvalues[a];
            assert!(resid.amax() < 1e-8);
            assert!(pe.eigenvalues[a] > 1e-9);
            for b in 0..8 {
                let dot: f64 = (0..n).map(|i| pe.vectors[i * 8 + a] * pe.vectors[i * 8 + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn isolated_nodes_get_zero_rows_and_small_graphs_fail() {
        let e = [[0, 1], [1, 2], [2, 0], [3, 4]];
        let pe = laplacian_pe(&e, 6, 2).unwrap();
        assert!(pe.vectors[10..12].iter().all(|&v| v == 0.0));
        assert!(laplacian_pe(&e, 6, 6).is_err());
    }
}
