//! Node embedder, graph encoder and classifier.
//!
//! Every forward pass runs on a [`Tape`] whose trainable leaves come from a
//! [`ParamStore`] laid out by [`init_params`]. The tensor names in that store
//! are the contract between this module, checkpoints and FedAvg.

mod loss;
mod pe;

use std::collections::HashMap;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::supervoxel::SupervoxelGraph;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::volume::N_MODALITIES;

pub use loss::{compound_loss, LossConfig, LossParts};
pub use pe::{laplacian_pe, normalized_laplacian, LaplacianPe};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_embedder_layers: usize,
    pub n_gnn_layers: usize,
    pub pe_dim: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Width of one patch row: neighbor intensities plus 3 coordinates.
    pub patch_features: usize,
    pub gat_negative_slope: f64,
    /// Patch intensities enter the model as `(x − center) / scale`; the
    /// coordinate columns are left alone. Without this, layer norm on a
    /// near-constant patch cancels its intensity level.
    pub intensity_center: f64,
    pub intensity_scale: f64,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 48,
            n_heads: 6,
            n_embedder_layers: 3,
            n_gnn_layers: 3,
            pe_dim: 8,
            ffn_mult: 4,
            dropout: 0.2,
            patch_features: 48,
            gat_negative_slope: 0.2,
            intensity_center: 0.5,
            intensity_scale: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("d_model", "must be a positive multiple of n_heads"));
        }
        if self.d_model < 2 {
            return Err(Error::invalid("d_model", "must be at least 2"));
        }
        if self.n_gnn_layers == 0 {
            return Err(Error::invalid("n_gnn_layers", "must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::invalid("ffn_mult", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        if self.patch_features <= 3 {
            return Err(Error::invalid("patch_features", "must exceed the 3 coordinate columns"));
        }
        if !(self.intensity_scale > 0.0) || !self.intensity_scale.is_finite() || !self.intensity_center.is_finite() {
            return Err(Error::invalid("intensity_scale", "must be finite and positive"));
        }
        Ok(())
    }
}

/// Everything a forward pass needs about one graph.
#[derive(Clone, Debug)]
pub struct GraphInput<T> {
    pub n_nodes: usize,
    /// `[N, R, F]`.
    pub patches: Tensor<T>,
    /// Modality of each patch row.
    pub modality: Arc<[usize]>,
    /// Message sources and destinations, self-loops appended.
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub pe: LaplacianPe,
    pub labels: Vec<u8>,
}

impl<T: Real> GraphInput<T> {
    /// Converts a stored graph, standardizing intensities as configured.
    pub fn from_graph(g: &SupervoxelGraph, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if g.n_features != cfg.patch_features {
            return Err(Error::shape(format!(
                "graph {} has {} patch features, model expects {}",
                g.case_id, g.n_features, cfg.patch_features
            )));
        }
        let n = g.n_nodes();
        let rows = g.n_patch_rows;
        if rows % N_MODALITIES != 0 {
            return Err(Error::shape(format!(
                "{rows} patch rows do not split into {N_MODALITIES} modalities"
            )));
        }
        let per = rows / N_MODALITIES;
        let f = g.n_features;
        let (c, s) = (cfg.intensity_center, cfg.intensity_scale);
        let data = g
            .patches
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let x = x as f64;
                T::from_f64(if i % f < f - 3 { (x - c) / s } else { x })
            })
            .collect();
        let patches = Tensor::new(vec![n, rows, f], data)?;
        let pe = laplacian_pe(&g.edges, n, cfg.pe_dim)?;
        Ok(Self::assemble(patches, (0..rows).map(|r| r / per).collect(), &g.edges, pe, g.labels.clone()))
    }

    pub fn assemble(
        patches: Tensor<T>,
        modality: Vec<usize>,
        edges: &[[u32; 2]],
        pe: LaplacianPe,
        labels: Vec<u8>,
    ) -> Self {
        let n = patches.shape()[0];
        let mut src: Vec<usize> = edges.iter().map(|e| e[1] as usize).collect();
        let mut dst: Vec<usize> = edges.iter().map(|e| e[0] as usize).collect();
        src.extend(0..n);
        dst.extend(0..n);
        Self {
            n_nodes: n,
            patches,
            modality: modality.into(),
            src: src.into(),
            dst: dst.into(),
            pe,
            labels,
        }
    }
}

/// Parameter handles on a tape, looked up by store name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Self {
        let vars = store
            .names()
            .iter()
            .cloned()
            .zip(tape.bind(store))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
    }
}

/// Fresh parameters. Weight matrices are Gaussian with Glorot variance,
/// embeddings Gaussian with sd 0.02, biases and LayerNorm shifts zero, and
/// LayerNorm scales one.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = substream(seed, &[0x1A17]);
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    let f = cfg.ffn_mult * d;
    let c = d / cfg.n_heads;
    let mut w = |s: &mut ParamStore<T>, name: String, fan_in: usize, fan_out: usize| {
        let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let nd = Normal::new(0.0, sd).unwrap();
        s.push(&name, Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64(nd.sample(&mut rng))))
    };
    let zeros = |s: &mut ParamStore<T>, name: String, shape: &[usize]| s.push(&name, Tensor::zeros(shape));
    let ones = |s: &mut ParamStore<T>, name: String, n: usize| s.push(&name, Tensor::full(&[n], T::one()));

    w(&mut s, "emb.in.w".into(), cfg.patch_features, d)?;
    zeros(&mut s, "emb.in.b".into(), &[d])?;
    let mut small = substream(seed, &[0x1A18]);
    let nd = Normal::new(0.0, 0.02).unwrap();
    s.push("emb.modality", Tensor::from_fn(&[N_MODALITIES, d], |_| T::from_f64(nd.sample(&mut small))))?;
    s.push("emb.cls", Tensor::from_fn(&[1, d], |_| T::from_f64(nd.sample(&mut small))))?;
    for l in 0..cfg.n_embedder_layers {
        let p = format!("emb.l{l}");
        ones(&mut s, format!("{p}.ln1.g"), d)?;
        zeros(&mut s, format!("{p}.ln1.b"), &[d])?;
        w(&mut s, format!("{p}.qkv.w"), d, 3 * d)?;
        zeros(&mut s, format!("{p}.qkv.b"), &[3 * d])?;
        w(&mut s, format!("{p}.out.w"), d, d)?;
        zeros(&mut s, format!("{p}.out.b"), &[d])?;
        ones(&mut s, format!("{p}.ln2.g"), d)?;
        zeros(&mut s, format!("{p}.ln2.b"), &[d])?;
        w(&mut s, format!("{p}.ff1.w"), d, f)?;
        zeros(&mut s, format!("{p}.ff1.b"), &[f])?;
        w(&mut s, format!("{p}.ff2.w"), f, d)?;
        zeros(&mut s, format!("{p}.ff2.b"), &[d])?;
    }
    ones(&mut s, "emb.ln.g".into(), d)?;
    zeros(&mut s, "emb.ln.b".into(), &[d])?;
    w(&mut s, "emb.proj.w".into(), 2 * d, d)?;
    zeros(&mut s, "emb.proj.b".into(), &[d])?;

    w(&mut s, "gnn.in.w".into(), d + cfg.pe_dim, d)?;
    zeros(&mut s, "gnn.in.b".into(), &[d])?;
    for l in 0..cfg.n_gnn_layers {
        let p = format!("gnn.l{l}");
        w(&mut s, format!("{p}.src.w"), d, d)?;
        w(&mut s, format!("{p}.dst.w"), d, d)?;
        w(&mut s, format!("{p}.att"), cfg.n_heads, c)?;
        w(&mut s, format!("{p}.val.w"), d, d)?;
        w(&mut s, format!("{p}.mix.w"), d, d)?;
        zeros(&mut s, format!("{p}.mix.b"), &[d])?;
        ones(&mut s, format!("{p}.ln.g"), d)?;
        zeros(&mut s, format!("{p}.ln.b"), &[d])?;
    }
    w(&mut s, "gnn.fuse.w".into(), cfg.n_gnn_layers * d, d)?;
    ones(&mut s, "gnn.fuse.ln.g".into(), d)?;
    zeros(&mut s, "gnn.fuse.ln.b".into(), &[d])?;

    let h = (d / 2).max(1);
    w(&mut s, "cls.l1.w".into(), d, d)?;
    zeros(&mut s, "cls.l1.b".into(), &[d])?;
    w(&mut s, "cls.l2.w".into(), d, h)?;
    zeros(&mut s, "cls.l2.b".into(), &[h])?;
    w(&mut s, "cls.l3.w".into(), h, 1)?;
    zeros(&mut s, "cls.l3.b".into(), &[1])?;
    Ok(s)
}

/// Dropout randomness for training; `None` runs in evaluation mode.
pub type Train<'a> = Option<&'a mut dyn RngCore>;

fn linear<T: Real>(t: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = t.matmul(x, b.get(&format!("{name}.w"))?)?;
    t.add(y, b.get(&format!("{name}.b"))?)
}

fn norm<T: Real>(t: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
    t.layer_norm(x, b.get(&format!("{name}.g"))?, b.get(&format!("{name}.b"))?)
}

fn drop<T: Real>(t: &mut Tape<T>, x: Var, p: f64, train: &mut Train) -> Var {
    match train {
        Some(rng) => t.dropout(x, p, &mut **rng),
        None => x,
    }
}

/// Per-layer CLS attention rows of one forward pass, `[N, H, T]` per layer,
/// where token 0 is CLS and token `1 + r` is patch row `r`.
pub type CapturedAttention = Vec<Vec<f32>>;

/// Patch Transformer over every node at once. Returns `[N, d]` features and,
/// if asked, the CLS attention rows of every layer.
pub fn node_embedder<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    g: &GraphInput<T>,
    train: &mut Train,
    capture: bool,
) -> Result<(Var, Option<CapturedAttention>)> {
    let shape = g.patches.shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.patch_features || shape[1] != g.modality.len() {
        return Err(Error::shape(format!(
            "patch tensor {shape:?} does not match {} features and {} rows",
            cfg.patch_features,
            g.modality.len()
        )));
    }
    let (n, rows) = (shape[0], shape[1]);
    let d = cfg.d_model;
    let x = t.constant(g.patches.clone());
    let x = linear(t, b, x, "emb.in")?;
    let m = t.gather_rows(b.get("emb.modality")?, g.modality.clone())?;
    let x = t.add(x, m)?;
    let cls = t.tile(b.get("emb.cls")?, n);
    let mut h = t.concat(&[cls, x], 1)?;
    let mut captured = capture.then(Vec::new);
    for l in 0..cfg.n_embedder_layers {
        let p = format!("emb.l{l}");
        let a = norm(t, b, h, &format!("{p}.ln1"))?;
        let qkv = linear(t, b, a, &format!("{p}.qkv"))?;
        let (att, rows_cls) = t.attention(qkv, cfg.n_heads, capture)?;
        if let (Some(c), Some(r)) = (captured.as_mut(), rows_cls) {
            c.push(r.iter().map(|v| v.as_f64() as f32).collect());
        }
        let o = linear(t, b, att, &format!("{p}.out"))?;
        let o = drop(t, o, cfg.dropout, train);
        h = t.add(h, o)?;
        let a = norm(t, b, h, &format!("{p}.ln2"))?;
        let f = linear(t, b, a, &format!("{p}.ff1"))?;
        let f = t.gelu(f);
        let f = drop(t, f, cfg.dropout, train);
        let f = linear(t, b, f, &format!("{p}.ff2"))?;
        h = t.add(h, f)?;
    }
    let h = norm(t, b, h, "emb.ln")?;
    let c = t.slice(h, 1, 0, 1)?;
    let c = t.reshape(c, &[n, d])?;
    let patches = t.slice(h, 1, 1, rows)?;
    let pooled = t.mean_axis(patches, 1);
    let both = t.concat(&[c, pooled], 1)?;
    let out = linear(t, b, both, "emb.proj")?;
    Ok((out, captured))
}

/// One GATv2 layer before its residual and normalization: per head,
/// `e_ij = a·LeakyReLU(W_dst h_i + W_src h_j)` over in-edges `j → i` and the
/// self-loop, softmax per destination, weighted sum of `W_v h_j`, heads
/// concatenated and mixed linearly. Also returns the attention weights
/// `[E, H]` in `(src, dst)` order.
pub fn gatv2_layer<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    h: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
    layer: usize,
) -> Result<(Var, Var)> {
    let p = format!("gnn.l{layer}");
    let n = t.shape(h)[0];
    let (heads, d) = (cfg.n_heads, cfg.d_model);
    let c = d / heads;
    let e = src.len();
    let xs = t.matmul(h, b.get(&format!("{p}.src.w"))?)?;
    let xd = t.matmul(h, b.get(&format!("{p}.dst.w"))?)?;
    let zs = t.gather_rows(xs, src.clone())?;
    let zd = t.gather_rows(xd, dst.clone())?;
    let z = t.add(zs, zd)?;
    let z = t.leaky_relu(z, T::from_f64(cfg.gat_negative_slope));
    let z = t.reshape(z, &[e, heads, c])?;
    let z = t.mul(z, b.get(&format!("{p}.att"))?)?;
    let score = t.sum_last(z);
    let alpha = t.segment_softmax(score, dst.clone(), n)?;
    let v = t.matmul(h, b.get(&format!("{p}.val.w"))?)?;
    let v = t.gather_rows(v, src.clone())?;
    let v = t.reshape(v, &[e, heads, c])?;
    let msg = t.scale_rows(v, alpha)?;
    let msg = t.reshape(msg, &[e, d])?;
    let agg = t.segment_sum(msg, dst.clone(), n)?;
    let out = linear(t, b, agg, &format!("{p}.mix"))?;
    Ok((out, alpha))
}

/// Layer outputs `e⁽¹⁾..e⁽ᴸ⁾` and the fused `[N, d]` node representation.
pub fn graph_encoder<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    feats: Var,
    pe: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
) -> Result<(Vec<Var>, Var)> {
    let x = t.concat(&[feats, pe], 1)?;
    let mut h = linear(t, b, x, "gnn.in")?;
    let mut layers = Vec::with_capacity(cfg.n_gnn_layers);
    for l in 0..cfg.n_gnn_layers {
        let (o, _) = gatv2_layer(t, b, cfg, h, src, dst, l)?;
        let r = t.add(h, o)?;
        h = norm(t, b, r, &format!("gnn.l{l}.ln"))?;
        layers.push(h);
    }
    let cat = t.concat(&layers, 1)?;
    let f = t.matmul(cat, b.get("gnn.fuse.w")?)?;
    let fused = norm(t, b, f, "gnn.fuse.ln")?;
    Ok((layers, fused))
}

pub fn classifier<T: Real>(t: &mut Tape<T>, b: &Bound, cfg: &ModelConfig, f: Var, train: &mut Train) -> Result<Var> {
    let x = linear(t, b, f, "cls.l1")?;
    let x = t.gelu(x);
    let x = drop(t, x, cfg.dropout, train);
    let x = linear(t, b, x, "cls.l2")?;
    let x = t.gelu(x);
    let x = drop(t, x, cfg.dropout, train);
    linear(t, b, x, "cls.l3")
}

/// Output of a full forward pass.
pub struct Forward {
    /// `[N, 1]` node logits.
    pub logits: Var,
    pub attention: Option<CapturedAttention>,
}

/// Full model. `pe_signs` multiplies the PE columns (all `+1` for
/// evaluation).
pub fn forward<T: Real>(
    t: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    g: &GraphInput<T>,
    pe_signs: &[f64],
    train: &mut Train,
    capture: bool,
) -> Result<Forward> {
    if g.pe.k != cfg.pe_dim || pe_signs.len() != cfg.pe_dim {
        return Err(Error::shape(format!(
            "positional encoding width {} (signs {}) but pe_dim {}",
            g.pe.k,
            pe_signs.len(),
            cfg.pe_dim
        )));
    }
    let (feats, attention) = node_embedder(t, b, cfg, g, train, capture)?;
    let pe_vals = g.pe.with_signs(pe_signs);
    let pe = t.constant(Tensor::new(
        vec![g.n_nodes, cfg.pe_dim],
        pe_vals.into_iter().map(T::from_f64).collect(),
    )?);
    let (_, fused) = graph_encoder(t, b, cfg, feats, pe, &g.src, &g.dst)?;
    let logits = classifier(t, b, cfg, fused, train)?;
    Ok(Forward { logits, attention })
}

/// Logits of a graph in evaluation mode, as plain numbers.
pub fn predict<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, g: &GraphInput<T>) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let signs = vec![1.0; cfg.pe_dim];
    let out = forward(&mut t, &b, cfg, g, &signs, &mut None, false)?;
    Ok(t.value(out.logits).data().iter().map(|v| v.as_f64()).collect())
}

/// Evaluation-mode logits and compound loss of one graph.
pub fn evaluate<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, g: &GraphInput<T>) -> Result<(Vec<f64>, f64)> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let signs = vec![1.0; cfg.pe_dim];
    let out = forward(&mut t, &b, cfg, g, &signs, &mut None, false)?;
    let l = compound_loss(&mut t, out.logits, &g.labels, &cfg.loss)?;
    let logits = t.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
    Ok((logits, t.value(l.total).item().as_f64()))
}

/// Evaluation-mode forward pass that also returns the CLS attention rows.
pub fn predict_with_attention<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    g: &GraphInput<T>,
) -> Result<(Vec<f64>, CapturedAttention)> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let signs = vec![1.0; cfg.pe_dim];
    let out = forward(&mut t, &b, cfg, g, &signs, &mut None, true)?;
    let logits = t.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
    Ok((logits, out.attention.unwrap_or_default()))
}

/// Loss and parameter gradients of one graph.
pub fn loss_and_grad<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    g: &GraphInput<T>,
    pe_signs: &[f64],
    train: &mut Train,
) -> Result<(f64, ParamStore<T>)> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let out = forward(&mut t, &b, cfg, g, pe_signs, train, false)?;
    let l = compound_loss(&mut t, out.logits, &g.labels, &cfg.loss)?;
    let value = t.value(l.total).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    Ok((value, t.backward(l.total)?))
}
