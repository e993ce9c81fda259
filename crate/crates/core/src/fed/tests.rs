use super::*;
use crate::model::{init_params, ModelConfig};
use crate::supervoxel::{build_graphs, GraphConfig};
use crate::volume::{synth_dataset, SynthSpec};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_embedder_layers: 1,
        n_gnn_layers: 2,
        pe_dim: 2,
        patch_features: 5,
        ..ModelConfig::default()
    }
}

fn graphs(n: usize) -> Vec<EvalGraph> {
    let cfg = small_cfg();
    let spec = SynthSpec {
        n_volumes: n,
        dims: [16, 16, 16],
        tumor_radius_range: [2.0, 4.0],
        ..SynthSpec::default()
    };
    let gcfg = GraphConfig {
        k_supervoxels: 27,
        patches_per_modality: 2,
        patch_neighbors: 2,
        knn_k: 4,
        ..GraphConfig::default()
    };
    let vols = synth_dataset(&spec).unwrap();
    build_graphs(&vols, &gcfg, 3)
        .unwrap()
        .iter()
        .map(|g| EvalGraph::from_graph(g, &cfg).unwrap())
        .collect()
}

fn schedule(rounds: usize) -> Schedule {
    Schedule {
        rounds,
        batch_size: 2,
        accum_steps: 1,
        patience: 100,
        ..Schedule::default()
    }
}

#[test]
fn one_client_federation_matches_centralized_bitwise() {
    let gs = graphs(6);
    let cfg = small_cfg();
    let init = init_params::<f32>(&cfg, 4).unwrap();
    let train: Vec<&EvalGraph> = gs[..4].iter().collect();
    let test: Vec<&EvalGraph> = gs[4..].iter().collect();
    let sched = schedule(3);
    let c = run_centralized(&init, &train, &test, &cfg, &sched, true).unwrap();
    let f = run_federated(&init, &[train.clone()], &[test.clone()], &cfg, &sched, true).unwrap();
    assert_eq!(c.trajectory.len(), 3);
    for (a, b) in c.trajectory.iter().zip(&f.trajectory) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(c.trajectory[0], init.flatten());
    let cd: Vec<f64> = c.primary_rows().map(|r| r.test.dice).collect();
    let fd: Vec<f64> = f.primary_rows().map(|r| r.test.dice).collect();
    assert_eq!(cd, fd);
}

#[test]
fn federated_runs_are_reproducible_and_log_every_client() {
    let gs = graphs(8);
    let cfg = small_cfg();
    let init = init_params::<f32>(&cfg, 5).unwrap();
    let train = vec![vec![&gs[0], &gs[1]], vec![&gs[2], &gs[3], &gs[4]]];
    let test = vec![vec![&gs[5]], vec![&gs[6], &gs[7]]];
    let sched = schedule(2);
    let a = run_federated(&init, &train, &test, &cfg, &sched, false).unwrap();
    let b = run_federated(&init, &train, &test, &cfg, &sched, false).unwrap();
    let rows = |h: &RunHistory| h.reports.iter().map(RoundReport::csv_row).collect::<Vec<_>>();
    assert_eq!(rows(&a), rows(&b));
    assert_eq!(a.reports.len(), 2 * 3);
    let upload = bytes_per_round(init.numel());
    assert_eq!(a.reports[0].bytes_uploaded, 2 * upload);
    assert_eq!(a.reports[1].bytes_uploaded, upload);
    assert_eq!(CSV_HEADER.split(',').count(), rows(&a)[0].split(',').count());
}

#[test]
fn frozen_model_stops_after_patience() {
    let gs = graphs(4);
    let cfg = small_cfg();
    let init = init_params::<f32>(&cfg, 6).unwrap();
    let sched = Schedule {
        base_lr: 0.0,
        patience: 2,
        ..schedule(10)
    };
    let train: Vec<&EvalGraph> = gs[..2].iter().collect();
    let test: Vec<&EvalGraph> = gs[2..].iter().collect();
    let h = run_centralized(&init, &train, &test, &cfg, &sched, false).unwrap();
    assert!(h.early_stopped);
    assert_eq!((h.best_round, h.stopped_round), (0, 3));
    assert_eq!(h.best_params.flatten(), init.flatten());
}

#[test]
fn isolated_clients_keep_separate_models() {
    let gs = graphs(6);
    let cfg = small_cfg();
    let init = init_params::<f32>(&cfg, 7).unwrap();
    let train = vec![vec![&gs[0], &gs[1]], vec![&gs[2], &gs[3]]];
    let test = vec![vec![&gs[4]], vec![&gs[5]]];
    let hs = run_isolated(&init, &train, &test, &cfg, &schedule(2)).unwrap();
    assert_eq!(hs.len(), 2);
    assert_eq!(hs[1].client, Some(1));
    assert_ne!(hs[0].best_params.flatten(), hs[1].best_params.flatten());
    assert!(hs.iter().all(|h| h.reports.iter().all(|r| r.bytes_uploaded == 0)));
}

#[test]
fn mismatched_client_lists_are_rejected() {
    let gs = graphs(3);
    let cfg = small_cfg();
    let init = init_params::<f32>(&cfg, 8).unwrap();
    let r = run_federated(&init, &[vec![&gs[0]]], &[], &cfg, &schedule(1), false);
    assert!(r.is_err());
}
