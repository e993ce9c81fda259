use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

const T_REF: [(f64, f64, f64); 10] = [
    (3.4641016151377544, 2.0, 0.96291004988627572695),
    (0.5, 1.0, 0.64758361765043327418),
    (-1.2, 3.0, 0.15813105734905261247),
    (2.0, 5.0, 0.94903026058507082188),
    (-0.3, 10.0, 0.3851603037828993064),
    (1.96, 30.0, 0.97032884355197476184),
    (4.5, 7.0, 0.99860083496107868514),
    (-2.5, 15.0, 0.012252901623256922717),
    (0.1, 100.0, 0.53972773445207438392),
    (7.0, 4.0, 0.9989039350966535305),
];

const F_REF: [(f64, f64, f64, f64); 10] = [
    (13.5, 1.0, 4.0, 0.97868835887124327415),
    (1.0, 2.0, 10.0, 0.59812242798353909465),
    (0.5, 3.0, 20.0, 0.31348138716359701718),
    (2.5, 4.0, 40.0, 0.9423539247696576512),
    (5.0, 2.0, 5.0, 0.93584997009004158172),
    (0.2, 10.0, 10.0, 0.0089500616013819049726),
    (3.0, 5.0, 5.0, 0.87341500244983868523),
    (1.5, 1.0, 100.0, 0.77645140613514671129),
    (8.0, 3.0, 12.0, 0.9966014883912396744),
    (0.9, 6.0, 30.0, 0.49218601276602800913),
];

#[test]
fn cdfs_match_high_precision_references() {
    for (t, df, want) in T_REF {
        assert!((t_cdf(t, df) - want).abs() < 1e-8, "t={t} df={df}");
    }
    for (f, d1, d2, want) in F_REF {
        assert!((f_cdf(f, d1, d2) - want).abs() < 1e-8, "F={f} ({d1},{d2})");
        assert!((f_sf(f, d1, d2) - (1.0 - want)).abs() < 1e-8);
    }
}

#[test]
fn anova_examples() {
    let same = one_way_anova(&vec![vec![1.0, 2.0, 3.0]; 3]).unwrap();
    assert_eq!((same.f, same.p), (0.0, 1.0));
    let a = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    assert!((a.f - 13.5).abs() < 1e-12);
    assert_eq!((a.df_between, a.df_within), (1, 4));
    assert!((a.p - 0.02131164112875672).abs() < 1e-6);
    let swapped = one_way_anova(&[vec![4.0, 5.0, 6.0], vec![1.0, 2.0, 3.0]]).unwrap();
    assert_eq!(a.f, swapped.f);
    let flat = one_way_anova(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!((flat.f, flat.p), (0.0, 1.0));
    assert!(one_way_anova(&[vec![1.0, 2.0]]).is_err());
    assert!(one_way_anova(&[vec![1.0], vec![2.0, 3.0]]).is_err());
}

#[test]
fn paired_t_examples() {
    let r = paired_ttest(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!((r.t - 3.4641016151377544).abs() < 1e-9);
    assert_eq!(r.df, 2);
    assert!((r.p - 0.07417990022744854).abs() < 1e-6);
    let s = paired_ttest(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
    assert_eq!(s.t, -r.t);
    assert_eq!(s.p, r.p);
    assert!(matches!(paired_ttest(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
}

#[test]
fn bonferroni_examples() {
    assert!((bonferroni(0.01, 3) - 0.03).abs() < 1e-15);
    assert_eq!(bonferroni(0.5, 3), 1.0);
    assert_eq!(bonferroni(0.0123, 1), 0.0123);
}

#[test]
fn cohens_d_examples() {
    assert!((cohens_d_paired(&[0.0, 1.0, 2.0], &[0.0; 3]).unwrap() - 1.0).abs() < 1e-12);
    let a = [1.0, 2.5, 3.0, 4.2];
    let b: Vec<f64> = a.iter().zip([0.01, -0.02, 0.015, 0.0]).map(|(x, j)| x + 2.0 + j).collect();
    assert!(cohens_d_paired(&a, &b).unwrap() < 0.0);
    let a10: Vec<f64> = a.iter().map(|x| 10.0 * x).collect();
    let b10: Vec<f64> = b.iter().map(|x| 10.0 * x).collect();
    let (d, d10) = (cohens_d_paired(&a, &b).unwrap(), cohens_d_paired(&a10, &b10).unwrap());
    assert!((d - d10).abs() < 1e-9 * d.abs());
}

fn case(deltas: &[f64]) -> ModalityAttention {
    ModalityAttention {
        case_id: "c".into(),
        layers: deltas.iter().map(|&d| [0.1, 0.1, 0.1 + d, 0.1 + d]).collect(),
    }
}

#[test]
fn layer_correlation_examples() {
    let r = layer_correlations(&[case(&[0.0, 1.0, 2.0]), case(&[2.0, 1.0, 0.0]), case(&[0.0, 2.0, 1.0]), case(&[1.0; 3])]).unwrap();
    let got: Vec<Option<f64>> = r.per_case.iter().map(|v| v.map(|x| (x * 1e12).round() / 1e12)).collect();
    assert_eq!(got, vec![Some(1.0), Some(-1.0), Some(0.5), None]);
    assert_eq!(r.excluded, 1);
    assert!((r.mean_r.unwrap() - 0.5 / 3.0).abs() < 1e-12);
}

#[test]
fn flat_trend_is_reported_as_undetectable() {
    let cases = vec![case(&[0.1, 0.2, 0.1]), case(&[0.3, 0.0, 0.3])];
    match trend_test(&cases) {
        Err(Error::Degenerate(m)) => assert_eq!(m, "no trend detectable"),
        other => panic!("{other:?}"),
    }
    let rep = stat_report(&cases).unwrap();
    assert!(rep.trend.is_none());
    assert!(rep.trend_error.unwrap().contains("no trend"));
}

#[test]
fn simulated_trend_t_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut ts = Vec::new();
    for _ in 0..200 {
        let cases: Vec<ModalityAttention> = (0..50)
            .map(|_| {
                let d0 = rng.gen_range(-0.05..0.05);
                case(&[d0, 0.0, d0 + 0.1 + noise.sample(&mut rng)])
            })
            .collect();
        ts.push(trend_test(&cases).unwrap().test.t);
    }
    let mean_t = ts.iter().sum::<f64>() / ts.len() as f64;
    // 0.1 / (0.05 / sqrt(50)) = 14.14; the sample-sd estimate biases the mean
    // t upward by about 1.6 % at df = 49.
    assert!((mean_t - 14.14).abs() < 0.6, "{mean_t}");
}

#[test]
fn uniform_rows_give_equal_modality_means() {
    let (heads, per) = (2, 3);
    let modality: Vec<usize> = (0..4 * per).map(|r| r / per).collect();
    let t = modality.len() + 1;
    let rows = vec![1.0 / t as f32; 5 * heads * t];
    let ma = modality_attention("u", &vec![rows], 5, heads, &modality).unwrap();
    for v in ma.layers[0] {
        assert_eq!(v, ma.layers[0][0]);
        assert!((v - 1.0 / t as f64).abs() < 1e-7);
    }
}

#[test]
fn mass_on_one_t2_patch() {
    let per = 90;
    let modality: Vec<usize> = (0..4 * per).map(|r| r / per).collect();
    let mut row = vec![0f32; 361];
    row[1 + 2 * per + 17] = 1.0;
    let m = node_modality_attention(&row, 1, &modality).unwrap();
    assert_eq!(m, [0.0, 0.0, 1.0 / 90.0, 0.0]);
}

#[test]
fn matches_brute_force_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, heads, per, layers) = (7, 3, 5, 3);
    let modality: Vec<usize> = (0..4 * per).map(|r| r / per).collect();
    let t = modality.len() + 1;
    let captured: Vec<Vec<f32>> = (0..layers)
        .map(|_| {
            let mut v: Vec<f32> = (0..n * heads * t).map(|_| rng.gen_range(0.0..1.0)).collect();
            for row in v.chunks_mut(t) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            v
        })
        .collect();
    let ma = modality_attention("r", &captured, n, heads, &modality).unwrap();
    for l in 0..layers {
        for m in 0..4 {
            let mut total = 0.0;
            for node in 0..n {
                let mut head_sum = 0.0;
                for h in 0..heads {
                    let mut s = 0.0;
                    for j in 0..4 * per {
                        if modality[j] == m {
                            s += captured[l][(node * heads + h) * t + 1 + j] as f64;
                        }
                    }
                    head_sum += s / per as f64;
                }
                total += head_sum / heads as f64;
            }
            assert!((ma.layers[l][m] - total / n as f64).abs() < 1e-7);
        }
    }
    // Within a layer, patch mass plus CLS self-attention reconstructs 1 per node.
    let node0: f64 = (0..heads)
        .map(|h| captured[0][h * t] as f64)
        .sum::<f64>()
        / heads as f64;
    let patch = node_modality_attention(&captured[0][..heads * t], heads, &modality).unwrap();
    assert!((per as f64 * patch.iter().sum::<f64>() + node0 - 1.0).abs() < 1e-4);
}

#[test]
fn malformed_records_are_rejected() {
    let modality: Vec<usize> = (0..8).map(|r| r / 2).collect();
    assert!(modality_attention("x", &vec![vec![0.0; 10]], 2, 1, &modality).is_err());
    assert!(modality_attention("x", &vec![], 2, 1, &modality).is_err());
    assert!(node_modality_attention(&[0.0; 9], 1, &[0, 0, 1, 1, 2, 2, 2, 2]).is_err());
}

#[test]
fn csv_has_one_row_per_case_and_layer() {
    let s = attention_csv(&[case(&[0.0, 0.1, 0.2]), case(&[0.1, 0.1, 0.3])]);
    assert_eq!(s.lines().count(), 1 + 6);
    assert_eq!(s.lines().next().unwrap(), ATTENTION_CSV_HEADER);
}

proptest::proptest! {
    #[test]
    fn p_values_stay_in_range(xs in proptest::collection::vec(-5.0f64..5.0, 6..30), shift in -2.0f64..2.0) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x + shift + 0.01 * i as f64).collect();
        if let Ok(t) = paired_ttest(&xs, &ys) {
            proptest::prop_assert!((0.0..=1.0).contains(&t.p));
        }
        let half = xs.len() / 2;
        let a = one_way_anova(&[xs[..half].to_vec(), xs[half..].to_vec()]).unwrap();
        proptest::prop_assert!(a.f >= 0.0 && (0.0..=1.0).contains(&a.p));
        for m in 1..5 {
            proptest::prop_assert!(bonferroni(a.p, m) <= bonferroni(a.p, m + 1));
        }
    }
}
