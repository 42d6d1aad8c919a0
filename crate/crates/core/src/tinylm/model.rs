//! Forward and backward passes over dense 32-bit effective weights.
//!
//! Weight matrices are `[out, in]` and applied as `y = x W^T`. For adapted
//! matrices the effective weight is `deq(W) + (alpha / r) A B`; when the
//! base has been pruned the low-rank delta is masked by the base's zero
//! pattern, so pruned weights stay exactly zero.

use rayon::prelude::*;

use super::flops::MacCount;
use super::lora::{low_rank_delta, LoraAdapters, LoraPair};
use super::{LmConfig, LmError};
use crate::tensors::{ModelBundle, StoredTensor, Tensor};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

pub(crate) const Q: usize = 0;
pub(crate) const K: usize = 1;
pub(crate) const V: usize = 2;
pub(crate) const O: usize = 3;
pub(crate) const UP: usize = 4;
pub(crate) const DOWN: usize = 5;
pub(crate) const PROJ_SUFFIXES: [&str; 6] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "mlp.w_up",
    "mlp.w_down",
];

pub(crate) struct Linear {
    pub(crate) name: String,
    pub(crate) out: usize,
    pub(crate) inp: usize,
    /// Effective weight used by the forward pass.
    pub(crate) w: Vec<f32>,
    /// Dequantized frozen base weight.
    base: Vec<f32>,
    /// Set when the base is pruned: positions allowed to be nonzero.
    keep: Option<Vec<bool>>,
    pub(crate) adapted: bool,
}

impl Linear {
    fn new(name: String, stored: &StoredTensor, pruned: bool) -> Self {
        let dense = stored.to_dense();
        let (out, inp) = (dense.shape()[0], dense.shape()[1]);
        let keep = pruned.then(|| stored.zero_flags().iter().map(|z| !z).collect());
        let base = dense.into_data();
        Self {
            name,
            out,
            inp,
            w: base.clone(),
            base,
            keep,
            adapted: false,
        }
    }

    fn set_delta(&mut self, pair: Option<&LoraPair>, scaling: f32) {
        match pair {
            None => {
                self.w.clone_from(&self.base);
                self.adapted = false;
            }
            Some(pair) => {
                let delta = low_rank_delta(pair, scaling);
                for (i, (w, (b, d))) in self.w.iter_mut().zip(self.base.iter().zip(&delta)).enumerate() {
                    let masked = self.keep.as_ref().is_some_and(|k| !k[i]);
                    *w = if masked { 0.0 } else { b + d };
                }
                self.adapted = true;
            }
        }
    }

    pub(crate) fn zero_count(&self) -> usize {
        self.w.iter().filter(|v| **v == 0.0).count()
    }

    /// `y = x W^T` for `t` rows of `x`.
    fn apply(&self, x: &[f32], t: usize, macs: &mut MacCount, zeros: usize) -> Vec<f32> {
        let mut y = vec![0.0f32; t * self.out];
        for (xr, yr) in x.chunks(self.inp).zip(y.chunks_mut(self.out)) {
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = dot(xr, &self.w[o * self.inp..(o + 1) * self.inp]);
            }
        }
        let n = (t * self.out * self.inp) as u64;
        macs.linear += n;
        macs.skipped += (t * zeros) as u64;
        y
    }

    /// `dx = dy W`
    fn backward_input(&self, dy: &[f32], t: usize) -> Vec<f32> {
        let mut dx = vec![0.0f32; t * self.inp];
        for (dyr, dxr) in dy.chunks(self.out).zip(dx.chunks_mut(self.inp)) {
            for (o, g) in dyr.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                axpy(dxr, *g, &self.w[o * self.inp..(o + 1) * self.inp]);
            }
        }
        dx
    }

    /// `dW = dy^T x`
    fn backward_weight(&self, dy: &[f32], x: &[f32]) -> Vec<f32> {
        let mut gw = vec![0.0f32; self.out * self.inp];
        for (dyr, xr) in dy.chunks(self.out).zip(x.chunks(self.inp)) {
            for (o, g) in dyr.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                axpy(&mut gw[o * self.inp..(o + 1) * self.inp], *g, xr);
            }
        }
        if let Some(keep) = &self.keep {
            for (g, k) in gw.iter_mut().zip(keep) {
                if !k {
                    *g = 0.0;
                }
            }
        }
        gw
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Norm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl Norm {
    fn forward(&self, x: &[f32]) -> (Vec<f32>, NormCache) {
        let d = self.gamma.len();
        let t = x.len() / d;
        let mut y = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        let mut rstd = Vec::with_capacity(t);
        for ((xr, yr), hr) in x.chunks(d).zip(y.chunks_mut(d)).zip(xhat.chunks_mut(d)) {
            let mean = xr.iter().sum::<f32>() / d as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for i in 0..d {
                hr[i] = (xr[i] - mean) * rs;
                yr[i] = self.gamma[i] * hr[i] + self.beta[i];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, dy: &[f32], cache: &NormCache) -> Vec<f32> {
        let d = self.gamma.len();
        let mut dx = vec![0.0f32; dy.len()];
        for (r, (dyr, dxr)) in dy.chunks(d).zip(dx.chunks_mut(d)).enumerate() {
            let hr = &cache.xhat[r * d..(r + 1) * d];
            let dh: Vec<f32> = dyr.iter().zip(&self.gamma).map(|(g, w)| g * w).collect();
            let mean_dh = dh.iter().sum::<f32>() / d as f32;
            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
            let rs = cache.rstd[r];
            for i in 0..d {
                dxr[i] = rs * (dh[i] - mean_dh - hr[i] * mean_dh_h);
            }
        }
        dx
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct Layer {
    ln1: Norm,
    ln2: Norm,
    proj: [Linear; 6],
}

struct LayerCache {
    ln1: NormCache,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[head][t][u]`, zero above the diagonal.
    probs: Vec<f32>,
    attn: Vec<f32>,
    ln2: NormCache,
    b: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    lnf: NormCache,
    t: usize,
}

/// A bundle (plus optional adapters) unpacked into dense effective weights,
/// ready for repeated forward passes.
pub struct Model {
    cfg: LmConfig,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    layers: Vec<Layer>,
    lnf: Norm,
    lm_head: Vec<f32>,
    /// Zero count of each effective matrix, `[layer][proj]`, plus the head.
    zeros: Vec<[usize; 6]>,
    head_zeros: usize,
    adapter_rank: usize,
}

fn dense(b: &ModelBundle, name: &str) -> Result<Vec<f32>, LmError> {
    b.get(name)
        .map(|t| t.to_dense().into_data())
        .ok_or_else(|| LmError::Architecture(format!("missing tensor `{name}`")))
}

impl Model {
    pub fn new(bundle: &ModelBundle, adapters: Option<&LoraAdapters>) -> Result<Self, LmError> {
        let cfg = bundle.config.clone();
        cfg.validate()?;
        cfg.check_bundle(bundle)?;
        let pruned = bundle.lineage.prune_spec.is_some();
        let norm = |prefix: &str| -> Result<Norm, LmError> {
            Ok(Norm {
                gamma: dense(bundle, &format!("{prefix}.gamma"))?,
                beta: dense(bundle, &format!("{prefix}.beta"))?,
            })
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let lin = |i: usize| {
                let name = format!("layers.{l}.{}", PROJ_SUFFIXES[i]);
                let stored = bundle.get(&name).expect("checked by check_bundle");
                Linear::new(name, stored, pruned)
            };
            layers.push(Layer {
                ln1: norm(&format!("layers.{l}.ln1"))?,
                ln2: norm(&format!("layers.{l}.ln2"))?,
                proj: [lin(Q), lin(K), lin(V), lin(O), lin(UP), lin(DOWN)],
            });
        }
        let lm_head = dense(bundle, "lm_head")?;
        let head_zeros = lm_head.iter().filter(|v| **v == 0.0).count();
        let mut model = Self {
            tok_emb: dense(bundle, "tok_emb")?,
            pos_emb: dense(bundle, "pos_emb")?,
            lnf: norm("ln_f")?,
            lm_head,
            layers,
            zeros: Vec::new(),
            head_zeros,
            adapter_rank: 0,
            cfg,
        };
        if let Some(a) = adapters {
            a.check(bundle)?;
        }
        model.set_adapters(adapters);
        Ok(model)
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Rebuilds effective weights for new adapter values.
    pub fn set_adapters(&mut self, adapters: Option<&LoraAdapters>) {
        let scaling = adapters.map_or(0.0, |a| a.scaling());
        self.adapter_rank = adapters.map_or(0, |a| a.rank);
        for layer in &mut self.layers {
            for lin in &mut layer.proj {
                lin.set_delta(adapters.and_then(|a| a.get(&lin.name)), scaling);
            }
        }
        self.zeros = self
            .layers
            .iter()
            .map(|l| std::array::from_fn(|i| l.proj[i].zero_count()))
            .collect();
    }

    pub(crate) fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().flat_map(|l| l.proj.iter())
    }

    /// MACs spent folding adapters into effective weights.
    pub fn adapter_build_macs(&self) -> u64 {
        self.linears()
            .filter(|l| l.adapted)
            .map(|l| (l.out * l.inp * self.adapter_rank) as u64)
            .sum()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::Empty("token sequence"));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(LmError::Length {
                len: tokens.len(),
                max_seq: self.cfg.max_seq,
            });
        }
        if let Some(id) = tokens.iter().find(|id| **id as usize >= self.cfg.vocab_size) {
            return Err(LmError::Vocab {
                id: *id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `len x vocab`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor, LmError> {
        Ok(self.logits_counted(tokens)?.0)
    }

    pub(crate) fn logits_counted(&self, tokens: &[u32]) -> Result<(Tensor, MacCount), LmError> {
        self.check_tokens(tokens)?;
        let mut macs = MacCount::default();
        let (logits, _) = self.run(tokens, false, &mut macs);
        Ok((
            Tensor::from_raw(vec![tokens.len(), self.cfg.vocab_size], logits),
            macs,
        ))
    }

    pub(crate) fn forward_cached(&self, tokens: &[u32], macs: &mut MacCount) -> (Vec<f32>, Cache) {
        let (logits, cache) = self.run(tokens, true, macs);
        (logits, cache.expect("cache requested"))
    }

    fn run(&self, tokens: &[u32], keep_cache: bool, macs: &mut MacCount) -> (Vec<f32>, Option<Cache>) {
        let d = self.cfg.d_model;
        let t = tokens.len();
        let mut x = vec![0.0f32; t * d];
        for (pos, (row, id)) in x.chunks_mut(d).zip(tokens).enumerate() {
            let e = &self.tok_emb[*id as usize * d..(*id as usize + 1) * d];
            let p = &self.pos_emb[pos * d..(pos + 1) * d];
            for i in 0..d {
                row[i] = e[i] + p[i];
            }
        }

        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        for (layer, zeros) in self.layers.iter().zip(&self.zeros) {
            let (a, ln1) = layer.ln1.forward(&x);
            let q = layer.proj[Q].apply(&a, t, macs, zeros[Q]);
            let k = layer.proj[K].apply(&a, t, macs, zeros[K]);
            let v = layer.proj[V].apply(&a, t, macs, zeros[V]);
            let (attn, probs) = self.attention(&q, &k, &v, t, macs);
            let o = layer.proj[O].apply(&attn, t, macs, zeros[O]);
            let h1: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

            let (b, ln2) = layer.ln2.forward(&h1);
            let up = layer.proj[UP].apply(&b, t, macs, zeros[UP]);
            let act: Vec<f32> = up.iter().map(|u| gelu(*u)).collect();
            let down = layer.proj[DOWN].apply(&act, t, macs, zeros[DOWN]);
            let out: Vec<f32> = h1.iter().zip(&down).map(|(a, b)| a + b).collect();

            if keep_cache {
                caches.push(LayerCache {
                    ln1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    ln2,
                    b,
                    up,
                    act,
                });
            }
            x = out;
        }

        let (z, lnf) = self.lnf.forward(&x);
        let vocab = self.cfg.vocab_size;
        let mut logits = vec![0.0f32; t * vocab];
        for (zr, lr) in z.chunks(d).zip(logits.chunks_mut(vocab)) {
            for (o, l) in lr.iter_mut().enumerate() {
                *l = dot(zr, &self.lm_head[o * d..(o + 1) * d]);
            }
        }
        macs.head += (t * vocab * d) as u64;
        macs.skipped += (t * self.head_zeros) as u64;

        let cache = keep_cache.then_some(Cache {
            layers: caches,
            lnf,
            t,
        });
        (logits, cache)
    }

    /// Causal multi-head attention on projected `q`, `k`, `v` (`t x d`).
    fn attention(&self, q: &[f32], k: &[f32], v: &[f32], t: usize, macs: &mut MacCount) -> (Vec<f32>, Vec<f32>) {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let inv = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; h * t * t];
        let mut out = vec![0.0f32; t * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut probs[(head * t + i) * t..(head * t + i) * t + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d + off..j * d + off + dh]) * inv;
                }
                softmax_in_place(row);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, p) in row.iter().enumerate() {
                    axpy(oi, *p, &v[j * d + off..j * d + off + dh]);
                }
            }
        }
        // QK^T and PV each cost d MACs per (query, key) pair
        macs.attention += (d * t * (t + 1)) as u64;
        (out, probs)
    }

    /// Backpropagates `dlogits` and returns `dL/dW_eff` for every projection,
    /// indexed `[layer][proj]`.
    pub(crate) fn backward(&self, cache: &Cache, dlogits: &[f32]) -> Vec<[Vec<f32>; 6]> {
        let d = self.cfg.d_model;
        let vocab = self.cfg.vocab_size;
        let t = cache.t;

        let mut dz = vec![0.0f32; t * d];
        for (dl, dzr) in dlogits.chunks(vocab).zip(dz.chunks_mut(d)) {
            for (o, g) in dl.iter().enumerate() {
                if *g != 0.0 {
                    axpy(dzr, *g, &self.lm_head[o * d..(o + 1) * d]);
                }
            }
        }
        let mut dx = self.lnf.backward(&dz, &cache.lnf);

        let mut grads: Vec<[Vec<f32>; 6]> = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // MLP branch: out = h1 + down(gelu(up(ln2(h1))))
            let g_down = layer.proj[DOWN].backward_weight(&dx, &lc.act);
            let dact = layer.proj[DOWN].backward_input(&dx, t);
            let dup: Vec<f32> = dact.iter().zip(&lc.up).map(|(g, u)| g * gelu_grad(*u)).collect();
            let g_up = layer.proj[UP].backward_weight(&dup, &lc.b);
            let db = layer.proj[UP].backward_input(&dup, t);
            let mut dh1 = layer.ln2.backward(&db, &lc.ln2);
            for (a, b) in dh1.iter_mut().zip(&dx) {
                *a += b;
            }

            // attention branch: h1 = x + wo(attn(ln1(x)))
            let g_o = layer.proj[O].backward_weight(&dh1, &lc.attn);
            let dattn = layer.proj[O].backward_input(&dh1, t);
            let (dq, dk, dv) = self.attention_backward(&dattn, lc, t);
            let g_q = layer.proj[Q].backward_weight(&dq, &lc.a);
            let g_k = layer.proj[K].backward_weight(&dk, &lc.a);
            let g_v = layer.proj[V].backward_weight(&dv, &lc.a);
            let mut da = layer.proj[Q].backward_input(&dq, t);
            for g in [
                layer.proj[K].backward_input(&dk, t),
                layer.proj[V].backward_input(&dv, t),
            ] {
                for (a, b) in da.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let mut dx_in = layer.ln1.backward(&da, &lc.ln1);
            for (a, b) in dx_in.iter_mut().zip(&dh1) {
                *a += b;
            }
            grads.push([g_q, g_k, g_v, g_o, g_up, g_down]);
            dx = dx_in;
        }
        grads.reverse();
        grads
    }

    fn attention_backward(&self, dout: &[f32], lc: &LayerCache, t: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let inv = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0f32; t * d];
        let mut dk = vec![0.0f32; t * d];
        let mut dv = vec![0.0f32; t * d];
        let mut dp = vec![0.0f32; t];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let p = &lc.probs[(head * t + i) * t..(head * t + i) * t + i + 1];
                let doi = &dout[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    dp[j] = dot(doi, &lc.v[j * d + off..j * d + off + dh]);
                    axpy(&mut dv[j * d + off..j * d + off + dh], p[j], doi);
                }
                let pdp: f32 = p.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - pdp) * inv;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi, kj) = (i * d + off, j * d + off);
                    for c in 0..dh {
                        dq[qi + c] += ds * lc.k[kj + c];
                        dk[kj + c] += ds * lc.q[qi + c];
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Logits of one token sequence (`len x vocab`).
pub fn forward(
    b: &ModelBundle,
    adapters: Option<&LoraAdapters>,
    tokens: &[u32],
) -> Result<Tensor, LmError> {
    Model::new(b, adapters)?.logits(tokens)
}

/// Independent forward passes over several sequences.
pub fn forward_batch(
    b: &ModelBundle,
    adapters: Option<&LoraAdapters>,
    batch: &[Vec<u32>],
) -> Result<Vec<Tensor>, LmError> {
    let model = Model::new(b, adapters)?;
    batch.par_iter().map(|seq| model.logits(seq)).collect()
}
