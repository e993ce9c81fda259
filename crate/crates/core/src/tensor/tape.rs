use std::sync::Arc;

use rand::Rng;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Softmax(Var),
    SegmentSoftmax {
        x: Var,
        seg: Arc<[usize]>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Powf(Var, T),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    SegmentSum {
        x: Var,
        seg: Arc<[usize]>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Tile(Var),
    ScaleRows(Var, Var),
    Attention {
        qkv: Var,
        heads: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation so its adjoint can be replayed in reverse.
///
/// Records are appended in evaluation order, which is a topological order,
/// and `backward` visits each one exactly once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    // tanh through a single exp; libm's tanh is several times slower
    let th = one - (one + one) / ((u + u).exp() + one);
    let val = half * x * (one + th);
    let du = c * (one + three * k * x * x);
    let der = half * (one + th) + half * x * (one - th * th) * du;
    (val, der)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every tensor in `store` as a trainable leaf, in store order.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store
            .iter()
            .map(|(name, t)| self.param(name, t.clone()))
            .collect()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.data(a),
            k,
            1,
            self.data(b),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::shape(format!("{name} {sa:?} with {sb:?}")));
        }
        let shape = sa.to_vec();
        let bd = self.data(b);
        let nb = bd.len();
        let mut data = Vec::with_capacity(self.data(a).len());
        for chunk in self.data(a).chunks(nb.max(1)) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Ok((Tensor { shape, data }, self.ng(a) || self.ng(b)))
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.map(x, |v| scale * v + shift);
        let ng = self.ng(x);
        self.push(t, Op::Affine(x, scale), ng)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = *v.shape.last().unwrap_or(&1);
        let mut data = v.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Softmax of `x[E, H]` over groups of rows sharing a segment id,
    /// independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, n_seg: usize) -> Result<Var> {
        let v = self.value(x);
        let e = v.shape.first().copied().unwrap_or(0);
        if seg.len() != e || seg.iter().any(|&s| s >= n_seg) {
            return Err(Error::shape("segment ids do not match rows".to_string()));
        }
        let h = if e == 0 { 0 } else { v.numel() / e };
        let mut max = vec![T::neg_infinity(); n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let m = &mut max[s * h + j];
                *m = m.max(v.data[r * h + j]);
            }
        }
        let mut data = vec![T::zero(); v.numel()];
        let mut sum = vec![T::zero(); n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let ex = (v.data[r * h + j] - max[s * h + j]).exp();
                data[r * h + j] = ex;
                sum[s * h + j] += ex;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..h {
                data[r * h + j] /= sum[s * h + j];
            }
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::SegmentSoftmax { x, seg }, ng))
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm over {c} with gamma {:?}",
                self.shape(gamma)
            )));
        }
        let rows = v.numel() / c;
        let cf = T::from_f64(c as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = vec![T::zero(); v.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v.data[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.map(x, |v| if v > T::zero() { v } else { slope * v });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// `ln(sigmoid(x))`, evaluated without cancellation.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, log_sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::LogSigmoid(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.ln());
        let ng = self.ng(x);
        self.push(t, Op::Log(x), ng)
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let t = self.map(x, |v| v.powf(p));
        let ng = self.ng(x);
        self.push(t, Op::Powf(x, p), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = *v.shape.last().unwrap_or(&1);
        let data = v.data.chunks(c).map(|r| r.iter().copied().sum()).collect();
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::SumLast(x), ng)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let lf = T::from_f64(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= lf);
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(
            Tensor { shape, data },
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            ng,
        )
    }

    /// `x[.., start..start+count, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(&v.shape, axis);
        if start + count > len {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis length {len}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&v.data[base..base + count * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = count;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            },
            ng,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            ng,
        ))
    }

    /// Selects rows (first axis) of `x` by index, with repetition allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape[0];
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::shape(format!("gather index out of range {n}")));
        }
        let r = v.numel() / n.max(1);
        let mut data = Vec::with_capacity(idx.len() * r);
        for &i in idx.iter() {
            data.extend_from_slice(&v.data[i * r..(i + 1) * r]);
        }
        let mut shape = v.shape.clone();
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, idx }, ng))
    }

    /// Sums rows of `x` into `n` buckets given by `seg`.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape.first() != Some(&seg.len()) || seg.iter().any(|&s| s >= n) {
            return Err(Error::shape("segment ids do not match rows".to_string()));
        }
        let r = v.numel() / seg.len().max(1);
        let mut data = vec![T::zero(); n * r];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..r {
                data[s * r + j] += v.data[e * r + j];
            }
        }
        let mut shape = v.shape.clone();
        shape[0] = n;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::SegmentSum { x, seg }, ng))
    }

    /// Inverted dropout. Masks are drawn from `rng` in row-major element
    /// order; `p == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(&v.shape);
        let mut data = Vec::with_capacity(reps * v.numel());
        for _ in 0..reps {
            data.extend_from_slice(&v.data);
        }
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Tile(x), ng)
    }

    /// `x[..., c] * s[...]`, scaling each length-`c` row by one entry of `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let rows = vs.numel();
        if rows == 0 || vx.numel() % rows != 0 {
            return Err(Error::shape(format!(
                "scale_rows {:?} by {:?}",
                vx.shape, vs.shape
            )));
        }
        let c = vx.numel() / rows;
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vs.data[i / c])
            .collect();
        let t = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::ScaleRows(x, s), ng))
    }

    /// Multi-head scaled dot-product self-attention over packed projections.
    ///
    /// `qkv` is `[B, T, 3d]` laid out as `[q | k | v]`; head `h` owns columns
    /// `h·d/H .. (h+1)·d/H` of each block. Returns `[B, T, d]`. When
    /// `capture` is set, the softmax row of token 0 for every (batch, head)
    /// is returned as a `[B, H, T]` buffer.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        capture: bool,
    ) -> Result<(Var, Option<Vec<T>>)> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || shape[2] % 3 != 0 || (shape[2] / 3) % heads != 0 {
            return Err(Error::shape(format!(
                "attention over {shape:?} with {heads} heads"
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2] / 3);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let src = self.data(qkv);
        let mut out = vec![T::zero(); b * t * d];
        let mut probs = vec![T::zero(); t * t];
        let mut captured = capture.then(|| vec![T::zero(); b * heads * t]);
        for bi in 0..b {
            let base = &src[bi * t * 3 * d..(bi + 1) * t * 3 * d];
            for h in 0..heads {
                head_probs(base, t, d, dh, h, scale, &mut probs);
                if let Some(c) = captured.as_mut() {
                    c[(bi * heads + h) * t..(bi * heads + h + 1) * t].copy_from_slice(&probs[..t]);
                }
                T::gemm(
                    t,
                    t,
                    dh,
                    &probs,
                    t,
                    1,
                    &base[2 * d + h * dh..],
                    3 * d,
                    1,
                    T::zero(),
                    &mut out[bi * t * d + h * dh..],
                    d,
                    1,
                );
            }
        }
        let ng = self.ng(qkv);
        let v = self.push(
            Tensor {
                shape: vec![b, t, d],
                data: out,
            },
            Op::Attention { qkv, heads },
            ng,
        );
        Ok((v, captured))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per registered
    /// parameter, in registration order; parameters the loss does not reach
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<ParamStore<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let mut store = ParamStore::new();
        for (name, v) in &self.params {
            let shape = self.shape(*v).to_vec();
            let data = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.value(*v).numel()]);
            store.push(name, Tensor { shape, data })?;
        }
        Ok(store)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let rows = self.value(*a).numel() / k.max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    T::gemm(rows, n, k, g, n, 1, self.data(*b), 1, n, T::one(), ga, k, 1);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    T::gemm(k, rows, n, self.data(*a), 1, k, g, n, 1, T::one(), gb, n, 1);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for (j, &s) in g.iter().enumerate() {
                        gb[j % nb] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let nb = self.value(*b).numel();
                if self.ng(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = self.acc(grads, *a).unwrap();
                    for (j, &s) in g.iter().enumerate() {
                        ga[j] += s * bd[j % nb];
                    }
                }
                if self.ng(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = self.acc(grads, *b).unwrap();
                    for (j, &s) in g.iter().enumerate() {
                        gb[j % nb] += s * ad[j];
                    }
                }
            }
            Op::Affine(x, scale) => {
                let scale = *scale;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * scale);
                }
            }
            Op::Softmax(x) => {
                let c = *out.shape.last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((y, gr), dx) in out
                        .data
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gx.chunks_mut(c))
                    {
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, seg } => {
                let e = seg.len();
                let h = if e == 0 { 0 } else { out.numel() / e };
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![T::zero(); n_seg * h];
                for (r, &s) in seg.iter().enumerate() {
                    for j in 0..h {
                        dot[s * h + j] += g[r * h + j] * out.data[r * h + j];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..h {
                            let k = r * h + j;
                            gx[k] += out.data[k] * (g[k] - dot[s * h + j]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gamma)[0];
                let cf = T::from_f64(c as f64);
                if self.ng(*x) {
                    let gm = self.data(*gamma).to_vec();
                    let gx = self.acc(grads, *x).unwrap();
                    for r in 0..inv_std.len() {
                        let row = r * c..(r + 1) * c;
                        let (gr, xh) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            gx[r * c + j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (k, &s) in g.iter().enumerate() {
                        gg[k % c] += s * xhat[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (k, &s) in g.iter().enumerate() {
                        gb[k % c] += s;
                    }
                }
            }
            Op::Gelu(x) => self.unary_back(*x, &out.data, g, grads, |a, _| gelu_parts(a).1),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                self.unary_back(*x, &out.data, g, grads, move |a, _| {
                    if a > T::zero() {
                        T::one()
                    } else {
                        slope
                    }
                })
            }
            Op::Sigmoid(x) => self.unary_back(*x, &out.data, g, grads, |_, y| y * (T::one() - y)),
            Op::LogSigmoid(x) => self.unary_back(*x, &out.data, g, grads, |a, _| sigmoid(-a)),
            Op::Log(x) => self.unary_back(*x, &out.data, g, grads, |a, _| T::one() / a),
            Op::Powf(x, p) => {
                let p = *p;
                self.unary_back(*x, &out.data, g, grads, move |a, _| {
                    if a == T::zero() {
                        T::zero()
                    } else {
                        p * a.powf(p - T::one())
                    }
                })
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = if matches!(self.nodes[i].op, Op::Mean(_)) {
                    g[0] / T::from_f64(n as f64)
                } else {
                    g[0]
                };
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumLast(x) => {
                let c = *self.shape(*x).last().unwrap_or(&1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / c];
                    }
                }
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let lf = T::from_f64(len as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                gx[(o * len + l) * inner + j] += g[o * inner + j] / lf;
                            }
                        }
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let count = out.numel() / (outer * inner).max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        let dst = (o * len + start) * inner;
                        let src = o * count * inner;
                        for j in 0..count * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).numel() / outer).collect();
                let total: usize = lens.iter().sum();
                let _ = inner;
                let mut off = 0;
                for (&p, &len) in parts.iter().zip(&lens) {
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..*outer {
                            for j in 0..len {
                                gp[o * len + j] += g[o * total + off + j];
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::Gather { x, idx } => {
                let r = out.numel() / idx.len().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (e, &s) in idx.iter().enumerate() {
                        for j in 0..r {
                            gx[s * r + j] += g[e * r + j];
                        }
                    }
                }
            }
            Op::SegmentSum { x, seg } => {
                let r = self.value(*x).numel() / seg.len().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..r {
                            gx[e * r + j] += g[s * r + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Tile(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len();
                    for (k, &s) in g.iter().enumerate() {
                        gx[k % n] += s;
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let rows = self.value(*s).numel();
                let c = out.numel() / rows;
                if self.ng(*x) {
                    let sd = self.data(*s).to_vec();
                    let gx = self.acc(grads, *x).unwrap();
                    for (k, &gv) in g.iter().enumerate() {
                        gx[k] += gv * sd[k / c];
                    }
                }
                if self.ng(*s) {
                    let xd = self.data(*x).to_vec();
                    let gs = self.acc(grads, *s).unwrap();
                    for (k, &gv) in g.iter().enumerate() {
                        gs[k / c] += gv * xd[k];
                    }
                }
            }
            Op::Attention { qkv, heads } => {
                let heads = *heads;
                let shape = self.shape(*qkv);
                let (b, t, d) = (shape[0], shape[1], shape[2] / 3);
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let src = self.data(*qkv).to_vec();
                let Some(gq) = self.acc(grads, *qkv) else {
                    return;
                };
                let mut probs = vec![T::zero(); t * t];
                let mut dp = vec![T::zero(); t * t];
                for bi in 0..b {
                    let base = &src[bi * t * 3 * d..(bi + 1) * t * 3 * d];
                    let gbase = &mut gq[bi * t * 3 * d..(bi + 1) * t * 3 * d];
                    let gout = &g[bi * t * d..(bi + 1) * t * d];
                    for h in 0..heads {
                        head_probs(base, t, d, dh, h, scale, &mut probs);
                        let go = &gout[h * dh..];
                        // dV = Pᵀ·dO
                        T::gemm(
                            t,
                            t,
                            dh,
                            &probs,
                            1,
                            t,
                            go,
                            d,
                            1,
                            T::one(),
                            &mut gbase[2 * d + h * dh..],
                            3 * d,
                            1,
                        );
                        // dP = dO·Vᵀ
                        T::gemm(
                            t,
                            dh,
                            t,
                            go,
                            d,
                            1,
                            &base[2 * d + h * dh..],
                            1,
                            3 * d,
                            T::zero(),
                            &mut dp,
                            t,
                            1,
                        );
                        for r in 0..t {
                            let pr = &probs[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        T::gemm(
                            t,
                            t,
                            dh,
                            &dp,
                            t,
                            1,
                            &base[d + h * dh..],
                            3 * d,
                            1,
                            T::one(),
                            &mut gbase[h * dh..],
                            3 * d,
                            1,
                        );
                        T::gemm(
                            t,
                            t,
                            dh,
                            &dp,
                            1,
                            t,
                            &base[h * dh..],
                            3 * d,
                            1,
                            T::one(),
                            &mut gbase[d + h * dh..],
                            3 * d,
                            1,
                        );
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        x: Var,
        out: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        der: impl Fn(T, T) -> T,
    ) {
        if !self.ng(x) {
            return;
        }
        let xs = self.data(x);
        let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); xs.len()]);
        for k in 0..gx.len() {
            gx[k] += g[k] * der(xs[k], out[k]);
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Row-softmax of `scale·Q_h·K_hᵀ` for one sequence, written into `probs`.
fn head_probs<T: Real>(
    base: &[T],
    t: usize,
    d: usize,
    dh: usize,
    h: usize,
    scale: T,
    probs: &mut [T],
) {
    T::gemm(
        t,
        dh,
        t,
        &base[h * dh..],
        3 * d,
        1,
        &base[d + h * dh..],
        1,
        3 * d,
        T::zero(),
        probs,
        t,
        1,
    );
    for row in probs.chunks_mut(t) {
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_in_place(row);
    }
}
