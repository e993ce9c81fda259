use super::*;
use crate::volume::{synth_volume, SynthSpec};

fn sizes(l: &Labeling) -> Vec<usize> {
    let mut s = vec![0; l.n_labels];
    for &v in &l.label_of {
        s[v as usize] += 1;
    }
    s
}

#[test]
fn constant_volume_splits_into_eight_blocks() {
    let ch = vec![0.5f32; 16 * 16 * 16];
    let r = slic3d(&ch, [16; 3], 8, 10.0, 10).unwrap();
    assert!((r.step - 8.0).abs() < 1e-12);
    let l = enforce_connectivity(&r.labeling, (r.step.powi(3) / 4.0) as usize);
    assert_eq!(l.n_labels, 8);
    for s in sizes(&l) {
        assert!((460..=563).contains(&s), "block of {s} voxels");
    }
}

#[test]
fn one_cluster_per_voxel_at_the_limit() {
    let ch: Vec<f32> = (0..16 * 16 * 16).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
    let r = slic3d(&ch, [16; 3], 4096, 10.0, 3).unwrap();
    assert_eq!(r.labeling.n_labels, 4096);
    let mut seen = vec![false; 4096];
    for &l in &r.labeling.label_of {
        assert!(!seen[l as usize]);
        seen[l as usize] = true;
    }
}

#[test]
fn too_many_clusters_is_rejected() {
    let ch = vec![0.5f32; 16 * 16 * 16];
    let err = slic3d(&ch, [16; 3], 4097, 10.0, 1).unwrap_err();
    assert!(err.to_string().contains("k_supervoxels"));
    assert!(slic3d(&ch, [16; 3], 4, 10.0, 1).is_err());
}

#[test]
fn half_spaces_are_not_straddled() {
    let dims = [16; 3];
    let ch: Vec<f32> = (0..4096)
        .map(|i| if i % 16 < 8 { 0.2 } else { 0.8 })
        .collect();
    let r = slic3d(&ch, dims, 64, 0.5, 10).unwrap();
    let l = enforce_connectivity(&r.labeling, (r.step.powi(3) / 4.0) as usize);
    // Count each label's voxels on either side, then flag minority voxels
    // lying more than one layer away from the boundary plane.
    let mut side = vec![[0usize; 2]; l.n_labels];
    for (i, &lab) in l.label_of.iter().enumerate() {
        side[lab as usize][usize::from(i % 16 >= 8)] += 1;
    }
    let mut far = 0;
    for (i, &lab) in l.label_of.iter().enumerate() {
        let x = i % 16;
        let s = side[lab as usize];
        let majority = usize::from(s[1] > s[0]);
        let mine = usize::from(x >= 8);
        if mine != majority && !(x == 7 || x == 8) {
            far += 1;
        }
    }
    assert_eq!(far, 0);
}

#[test]
fn label_threshold_examples() {
    let mask: Vec<u8> = (0..40).map(|i| u8::from(i < 4 || i >= 20)).collect();
    let members = vec![(0..20).collect::<Vec<u32>>(), (20..30).collect(), (4..14).collect()];
    let (labels, frac) = assign_labels(&members, &mask, 0.2, false);
    assert_eq!(frac, vec![0.2, 1.0, 0.0]);
    assert_eq!(labels, vec![1, 1, 0]);
    let (strict, _) = assign_labels(&members, &mask, 0.2, true);
    assert_eq!(strict, vec![0, 1, 0]);
}

fn small_case() -> Volume {
    let spec = SynthSpec {
        dims: [20, 20, 20],
        tumor_radius_range: [3.0, 4.0],
        ..SynthSpec::default()
    };
    synth_volume(&spec, 3).unwrap().0
}

fn small_cfg() -> GraphConfig {
    GraphConfig {
        k_supervoxels: 60,
        patches_per_modality: 6,
        patch_neighbors: 9,
        ..GraphConfig::default()
    }
}

#[test]
fn pipeline_invariants_on_a_synthetic_case() {
    let v = small_case();
    let cfg = small_cfg();
    let g = build_supervoxel_graph(&v, &cfg, 11).unwrap();
    let n = g.n_nodes();
    assert!(n >= 2);

    // pruning removes the zero background around the head
    let covered: usize = g.voxel_map.iter().map(Vec::len).sum();
    assert!(covered < v.n_voxels());

    let mut deg = vec![0usize; n];
    g.edges.iter().for_each(|e| deg[e[0] as usize] += 1);
    assert!(deg.iter().all(|&d| d == cfg.knn_k.min(n - 1)));
    assert!(g.edges.iter().all(|e| e[0] != e[1]));

    for (i, &l) in g.labels.iter().enumerate() {
        assert_eq!(l == 1, g.tumor_fraction[i] >= 0.2);
    }

    let w = cfg.n_features();
    let p = cfg.patches_per_modality;
    for i in 0..n {
        let t = g.node_patch(i);
        assert_eq!(t.len(), cfg.n_patch_rows() * w);
        for (r, row) in t.chunks(w).enumerate() {
            let m = r / p;
            for x in &row[..cfg.patch_neighbors] {
                assert!(g.voxel_map[i].iter().any(|&j| v.channels[m][j as usize] == *x));
            }
            assert!(row[cfg.patch_neighbors..].iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    // determinism down to the byte
    let again = build_supervoxel_graph(&v, &cfg, 11).unwrap();
    assert_eq!(g.to_bytes(), again.to_bytes());
}

#[test]
fn labeling_partitions_the_grid_and_pruning_is_monotone() {
    let v = small_case();
    let r = slic3d(&v.channels[0], v.dims, 60, 10.0, 10).unwrap();
    let l = enforce_connectivity(&r.labeling, (r.step.powi(3) / 4.0) as usize);
    assert_eq!(sizes(&l).iter().sum::<usize>(), v.n_voxels());
    let (kept, _) = prune_background(&l, &v.channels[0]).unwrap();
    let means = label_means(&l, &v.channels[0]);
    let lo = kept.iter().map(|&k| means[k as usize].unwrap()).fold(f64::INFINITY, f64::min);
    let hi = (0..l.n_labels as u32)
        .filter(|k| !kept.contains(k))
        .map(|k| means[k as usize].unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(lo > hi);
}

fn toy_graph(n: usize) -> SupervoxelGraph {
    let rows = 8;
    let feats = 5;
    SupervoxelGraph {
        case_id: "case_x".into(),
        dims: [16; 3],
        prune_threshold: 0.25,
        mask_voxels: 17,
        centroids: (0..n).map(|i| [i as f64, 1.5, 2.0]).collect(),
        edges: (0..n as u32).map(|i| [i, (i + 1) % n as u32]).collect(),
        n_patch_rows: rows,
        n_features: feats,
        patches: (0..n * rows * feats).map(|i| i as f32 * 0.5).collect(),
        labels: (0..n).map(|i| (i % 2) as u8).collect(),
        voxel_map: (0..n as u32).map(|i| (0..=i).collect()).collect(),
        tumor_fraction: (0..n).map(|i| i as f64 / n as f64).collect(),
    }
}

#[test]
fn graph_round_trip_and_size() {
    let g = toy_graph(10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.svg");
    write_graph(&g, &path).unwrap();
    assert_eq!(read_graph(&path).unwrap(), g);

    let header = 4 + 4 + (4 + 6) + 12 + 8 + 8 + 16;
    let map_entries: usize = (1..=10).sum();
    let body = 10 * 24 + 10 * 8 + 10 * 8 * 5 * 4 + 10 + 10 * 4 + map_entries * 4 + 10 * 8;
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, header + body);
}

#[test]
fn corrupted_graph_files_are_rejected() {
    let g = toy_graph(10);
    let bytes = g.to_bytes();
    // n_nodes sits right after magic, version, case_id, dims, threshold, mask count
    let off = 4 + 4 + 4 + 6 + 12 + 8 + 8;
    let mut bad = bytes.clone();
    bad[off] = 11;
    assert!(SupervoxelGraph::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(SupervoxelGraph::from_bytes(&bad).is_err());
    assert!(SupervoxelGraph::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(read_graph(std::path::Path::new("/nonexistent/g.svg")).is_err());
}
