//! Finite-difference checks for every op family on the tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Largest relative error between the tape gradient and central differences
/// over every entry of every parameter.
pub(crate) fn max_rel_error(
    params: &ParamStore<f64>,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap().flatten();
    let flat = params.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += H;
        let mut minus = flat.clone();
        minus[i] -= H;
        let num = (eval(&params.unflatten(&plus).unwrap())
            - eval(&params.unflatten(&minus).unwrap()))
            / (2.0 * H);
        let denom = grads[i].abs().max(num.abs()).max(1e-5);
        worst = worst.max((grads[i] - num).abs() / denom);
    }
    worst
}

/// Projects `y` onto fixed random weights so every output entry matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.push(name, rand_tensor(&mut rng, shape)).unwrap();
    }
    s
}

fn assert_grad(entries: &[(&str, &[usize])], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let params = store(entries, 7);
    let err = max_rel_error(&params, f);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn square_at_three() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::new(vec![1], vec![3.0]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[6.0]);
}

#[test]
fn summed_softmax_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.1]).unwrap());
    let s = tape.softmax(x);
    let l = tape.sum(s);
    let g = tape.backward(l).unwrap();
    assert!(g.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn unreachable_parameter_gets_zeros() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::full(&[2], 1.0));
    tape.param("unused", Tensor::full(&[3], 1.0));
    let l = tape.sum(x);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get("unused").unwrap().data(), &[0.0; 3]);
    assert_eq!(g.get("x").unwrap().data(), &[1.0; 2]);
}

#[test]
fn grad_matmul_and_broadcast_arith() {
    assert_grad(&[("a", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5]), ("c", &[3, 5])], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let y = t.add(y, v[2]).unwrap();
        let y = t.mul(y, v[3]).unwrap();
        let y = t.sub(y, v[2]).unwrap();
        let y = t.affine(y, 1.7, -0.3);
        probe(t, y, 1)
    });
}

#[test]
fn grad_softmax_and_layer_norm() {
    assert_grad(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        let y = t.softmax(y);
        probe(t, y, 2)
    });
}

#[test]
fn grad_pointwise_nonlinearities() {
    assert_grad(&[("x", &[17])], &|t, v| {
        let a = t.gelu(v[0]);
        let b = t.leaky_relu(v[0], 0.2);
        let c = t.sigmoid(v[0]);
        let d = t.log_sigmoid(v[0]);
        let e = t.sum(a);
        let s = t.concat(&[a, b, c, d], 0).unwrap();
        let p = probe(t, s, 3);
        t.add(p, e).unwrap()
    });
}

#[test]
fn grad_log_and_powf_on_positive_inputs() {
    assert_grad(&[("x", &[9])], &|t, v| {
        let p = t.sigmoid(v[0]);
        let l = t.log(p);
        let q = t.powf(p, 2.0);
        let r = t.powf(p, 1.5);
        let s = t.concat(&[l, q, r], 0).unwrap();
        probe(t, s, 4)
    });
}

#[test]
fn grad_reductions_slices_and_reshapes() {
    assert_grad(&[("x", &[2, 5, 3]), ("y", &[2, 2, 3])], &|t, v| {
        let m = t.mean_axis(v[0], 1);
        let s = t.slice(v[0], 1, 1, 3).unwrap();
        let c = t.concat(&[s, v[1]], 1).unwrap();
        let r = t.reshape(c, &[10, 3]).unwrap();
        let sl = t.sum_last(r);
        let a = probe(t, m, 5);
        let b = probe(t, sl, 6);
        let tot = t.add(a, b).unwrap();
        let mean = t.mean(v[1]);
        t.add(tot, mean).unwrap()
    });
}

#[test]
fn grad_gather_segments_and_tiles() {
    let idx: Arc<[usize]> = vec![0, 2, 2, 1, 3, 0].into();
    let seg: Arc<[usize]> = vec![1, 0, 1, 2, 2, 2].into();
    assert_grad(&[("x", &[4, 3]), ("s", &[6, 2]), ("c", &[3])], &move |t, v| {
        let g = t.gather_rows(v[0], idx.clone()).unwrap();
        let ss = t.segment_sum(g, seg.clone(), 3).unwrap();
        let sm = t.segment_softmax(v[1], seg.clone(), 3).unwrap();
        let tl = t.tile(v[2], 4);
        let sr = t.reshape(sm, &[12]).unwrap();
        let rows = t.reshape(g, &[6, 3]).unwrap();
        let sc = t.slice(sr, 0, 0, 6).unwrap();
        let scaled = t.scale_rows(rows, sc).unwrap();
        let a = probe(t, ss, 7);
        let b = probe(t, scaled, 8);
        let c = probe(t, tl, 9);
        let ab = t.add(a, b).unwrap();
        t.add(ab, c).unwrap()
    });
}

#[test]
fn grad_attention() {
    assert_grad(&[("qkv", &[2, 5, 12])], &|t, v| {
        let (y, _) = t.attention(v[0], 2, false).unwrap();
        probe(t, y, 10)
    });
}

#[test]
fn grad_dropout_with_fixed_mask() {
    assert_grad(&[("x", &[20])], &|t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = t.dropout(v[0], 0.3, &mut rng);
        let y = t.gelu(y);
        probe(t, y, 12)
    });
}

#[test]
fn grad_three_layer_mlp() {
    assert_grad(
        &[
            ("w1", &[5, 8]),
            ("b1", &[8]),
            ("w2", &[8, 8]),
            ("b2", &[8]),
            ("w3", &[8, 1]),
            ("b3", &[1]),
            ("x", &[6, 5]),
        ],
        &|t, v| {
            let h = t.matmul(v[6], v[0]).unwrap();
            let h = t.add(h, v[1]).unwrap();
            let h = t.gelu(h);
            let h = t.matmul(h, v[2]).unwrap();
            let h = t.add(h, v[3]).unwrap();
            let h = t.sigmoid(h);
            let o = t.matmul(h, v[4]).unwrap();
            let o = t.add(o, v[5]).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.mean(sq)
        },
    );
}

/// Attention against a composition of primitive ops (slice, matmul-free
/// dot products, row softmax).
#[test]
fn attention_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, tk, d, heads) = (2, 4, 6, 3);
    let qkv = rand_tensor(&mut rng, &[b, tk, 3 * d]);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(qkv.clone());
    let (y, cls) = tape.attention(x, heads, true).unwrap();
    let y = tape.value(y).clone();
    let cls = cls.unwrap();
    let dh = d / heads;
    let at = |bi: usize, ti: usize, c: usize| qkv.data()[(bi * tk + ti) * 3 * d + c];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tk {
                let mut w: Vec<f64> = (0..tk)
                    .map(|j| {
                        (0..dh).map(|c| at(bi, i, h * dh + c) * at(bi, j, d + h * dh + c)).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = w.iter().cloned().fold(f64::MIN, f64::max);
                w.iter_mut().for_each(|v| *v = (*v - m).exp());
                let z: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= z);
                if i == 0 {
                    for j in 0..tk {
                        assert!((cls[(bi * heads + h) * tk + j] - w[j]).abs() < 1e-12);
                    }
                }
                for c in 0..dh {
                    let expect: f64 = (0..tk).map(|j| w[j] * at(bi, j, 2 * d + h * dh + c)).sum();
                    let got = y.data()[(bi * tk + i) * d + h * dh + c];
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_rows_and_segments_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[7, 9], |_| rng.gen_range(-30.0..30.0)));
    let s = tape.softmax(x);
    for row in tape.value(s).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let seg: Arc<[usize]> = vec![0, 0, 1, 2, 1, 1, 2].into();
    let ss = tape.segment_softmax(x, seg.clone(), 3).unwrap();
    let v = tape.value(ss).data();
    for s_id in 0..3 {
        for col in 0..9 {
            let tot: f64 = (0..7).filter(|&r| seg[r] == s_id).map(|r| v[r * 9 + col]).sum();
            assert!((tot - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[5, 32], |_| rng.gen_range(-4.0..9.0)));
    let g = tape.constant(Tensor::full(&[32], 1.0));
    let b = tape.constant(Tensor::zeros(&[32]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).data().chunks(32) {
        let m = row.iter().sum::<f64>() / 32.0;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-12);
        // variance is var/(var+eps), within 1e-5 of one for non-degenerate rows
        assert!((v - 1.0).abs() < 1e-5);
    }
}

#[test]
fn shape_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(tape.matmul(a, b).is_err());
    assert!(tape.add(a, b).is_err());
    assert!(tape.slice(a, 1, 2, 2).is_err());
    assert!(tape.attention(a, 2, false).is_err());
}
