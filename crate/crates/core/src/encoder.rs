//! Transformer sequence encoder over item representations, with the
//! next-item softmax objective and an exact reverse pass.
//!
//! Each layer is pre-norm: `x + MH(LN(x))` followed by `x + FFN(LN(x))`,
//! with causal multi-head self-attention and a GELU feed-forward block of
//! inner width `4 * d`. A final layer norm follows the last layer (when
//! there is at least one). The sequence representation is the output at
//! the last real position.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::code_model::{batch_item_matrix, scatter_item_grads, CodeEmbeddingTable};
use crate::coder::ItemCode;
use crate::error::{Error, Result};
use crate::nn::{
    affine, affine_back, attention, attention_back, gelu, gelu_grad, layer_norm, layer_norm_back,
    softmax_rows, tmut, tref, uniform2, xavier, AttnCache, LnCache, Parameters, TensorMut,
    TensorRef,
};

pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 300,
            heads: 4,
            layers: 2,
            max_len: 50,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "head count {} does not divide hidden size {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerParams {
    fn init(d: usize, rng: &mut impl Rng) -> Self {
        let inner = FFN_MULT * d;
        LayerParams {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: xavier(d, d, rng),
            bq: Array1::zeros(d),
            wk: xavier(d, d, rng),
            bk: Array1::zeros(d),
            wv: xavier(d, d, rng),
            bv: Array1::zeros(d),
            wo: xavier(d, d, rng),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: xavier(d, inner, rng),
            b1: Array1::zeros(inner),
            w2: xavier(inner, d, rng),
            b2: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

impl EncoderParams {
    pub fn init(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(EncoderParams {
            cfg,
            pos: uniform2(cfg.max_len, d, 0.02, rng),
            layers: (0..cfg.layers).map(|_| LayerParams::init(d, rng)).collect(),
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        tref(&mut v, "pos", &self.pos);
        for (l, p) in self.layers.iter().enumerate() {
            tref(&mut v, format!("layer{l}.ln1.g"), &p.ln1_g);
            tref(&mut v, format!("layer{l}.ln1.b"), &p.ln1_b);
            tref(&mut v, format!("layer{l}.wq"), &p.wq);
            tref(&mut v, format!("layer{l}.bq"), &p.bq);
            tref(&mut v, format!("layer{l}.wk"), &p.wk);
            tref(&mut v, format!("layer{l}.bk"), &p.bk);
            tref(&mut v, format!("layer{l}.wv"), &p.wv);
            tref(&mut v, format!("layer{l}.bv"), &p.bv);
            tref(&mut v, format!("layer{l}.wo"), &p.wo);
            tref(&mut v, format!("layer{l}.bo"), &p.bo);
            tref(&mut v, format!("layer{l}.ln2.g"), &p.ln2_g);
            tref(&mut v, format!("layer{l}.ln2.b"), &p.ln2_b);
            tref(&mut v, format!("layer{l}.ffn.w1"), &p.w1);
            tref(&mut v, format!("layer{l}.ffn.b1"), &p.b1);
            tref(&mut v, format!("layer{l}.ffn.w2"), &p.w2);
            tref(&mut v, format!("layer{l}.ffn.b2"), &p.b2);
        }
        tref(&mut v, "lnf.g", &self.lnf_g);
        tref(&mut v, "lnf.b", &self.lnf_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        tmut(&mut v, "pos", &mut self.pos);
        for (l, p) in self.layers.iter_mut().enumerate() {
            tmut(&mut v, format!("layer{l}.ln1.g"), &mut p.ln1_g);
            tmut(&mut v, format!("layer{l}.ln1.b"), &mut p.ln1_b);
            tmut(&mut v, format!("layer{l}.wq"), &mut p.wq);
            tmut(&mut v, format!("layer{l}.bq"), &mut p.bq);
            tmut(&mut v, format!("layer{l}.wk"), &mut p.wk);
            tmut(&mut v, format!("layer{l}.bk"), &mut p.bk);
            tmut(&mut v, format!("layer{l}.wv"), &mut p.wv);
            tmut(&mut v, format!("layer{l}.bv"), &mut p.bv);
            tmut(&mut v, format!("layer{l}.wo"), &mut p.wo);
            tmut(&mut v, format!("layer{l}.bo"), &mut p.bo);
            tmut(&mut v, format!("layer{l}.ln2.g"), &mut p.ln2_g);
            tmut(&mut v, format!("layer{l}.ln2.b"), &mut p.ln2_b);
            tmut(&mut v, format!("layer{l}.ffn.w1"), &mut p.w1);
            tmut(&mut v, format!("layer{l}.ffn.b1"), &mut p.b1);
            tmut(&mut v, format!("layer{l}.ffn.w2"), &mut p.w2);
            tmut(&mut v, format!("layer{l}.ffn.b2"), &mut p.b2);
        }
        tmut(&mut v, "lnf.g", &mut self.lnf_g);
        tmut(&mut v, "lnf.b", &mut self.lnf_b);
        v
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    ctx: Array2<f64>,
    ln2: LnCache,
    bn: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

/// Forward state of one sequence.
pub struct SeqCache {
    layers: Vec<LayerCache>,
    lnf: Option<LnCache>,
}

/// Runs the encoder over one sequence of input vectors (`n x d`) and
/// returns the output at every position.
pub fn forward_seq(p: &EncoderParams, inputs: &Array2<f64>) -> Result<(Array2<f64>, SeqCache)> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::shape("empty sequence"));
    }
    if n > p.cfg.max_len {
        return Err(Error::shape(format!(
            "sequence length {n} exceeds maximum {}",
            p.cfg.max_len
        )));
    }
    let mut x = inputs + &p.pos.slice(s![..n, ..]);
    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = affine(&a.view(), &lp.wq, &lp.bq);
        let k = affine(&a.view(), &lp.wk, &lp.bk);
        let v = affine(&a.view(), &lp.wv, &lp.bv);
        let (ctx, attn) = attention(&q, &k, &v, p.cfg.heads, true);
        x = x + affine(&ctx.view(), &lp.wo, &lp.bo);
        let (bn, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let u = affine(&bn.view(), &lp.w1, &lp.b1);
        let act = u.mapv(gelu);
        x = x + affine(&act.view(), &lp.w2, &lp.b2);
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            bn,
            u,
            act,
        });
    }
    if layers.is_empty() {
        return Ok((x, SeqCache { layers, lnf: None }));
    }
    let (out, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    Ok((
        out,
        SeqCache {
            layers,
            lnf: Some(lnf),
        },
    ))
}

/// Reverse of [`forward_seq`]: accumulates parameter gradients into
/// `grads` and returns the gradient with respect to the input vectors.
pub fn backward_seq(
    p: &EncoderParams,
    cache: &SeqCache,
    d_out: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Array2<f64> {
    let n = d_out.nrows();
    let mut dx = match &cache.lnf {
        Some(lnf) => layer_norm_back(d_out, lnf, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b),
        None => d_out.clone(),
    };
    for ((lp, lc), lg) in p
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // x2 = x1 + FFN(LN2(x1))
        let d_act = affine_back(&lc.act.view(), &lp.w2, &dx, &mut lg.w2, &mut lg.b2);
        let du = d_act * &lc.u.mapv(gelu_grad);
        let dbn = affine_back(&lc.bn.view(), &lp.w1, &du, &mut lg.w1, &mut lg.b1);
        dx += &layer_norm_back(&dbn, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

        // x1 = x + MH(LN1(x))
        let dctx = affine_back(&lc.ctx.view(), &lp.wo, &dx, &mut lg.wo, &mut lg.bo);
        let (dq, dk, dv) = attention_back(&dctx, &lc.q, &lc.k, &lc.v, &lc.attn);
        let mut da = affine_back(&lc.a.view(), &lp.wq, &dq, &mut lg.wq, &mut lg.bq);
        da += &affine_back(&lc.a.view(), &lp.wk, &dk, &mut lg.wk, &mut lg.bk);
        da += &affine_back(&lc.a.view(), &lp.wv, &dv, &mut lg.wv, &mut lg.bv);
        dx += &layer_norm_back(&da, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
    }
    grads.pos.slice_mut(s![..n, ..]).scaled_add(1.0, &dx);
    dx
}

/// Padded item-index sequences with their true lengths and next-item targets.
///
/// Entries of `items[b]` past `lengths[b]` are padding: they are run through
/// the encoder but, under the causal mask, cannot affect the output read at
/// position `lengths[b] - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub items: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
}

impl SequenceBatch {
    /// Builds an unpadded batch, keeping the most recent `max_len` items of
    /// each history.
    pub fn from_examples(examples: &[(Vec<usize>, usize)], max_len: usize) -> Self {
        let items: Vec<Vec<usize>> = examples
            .iter()
            .map(|(h, _)| h[h.len().saturating_sub(max_len)..].to_vec())
            .collect();
        SequenceBatch {
            lengths: items.iter().map(Vec::len).collect(),
            items,
            targets: examples.iter().map(|(_, t)| *t).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, item_count: usize) -> Result<()> {
        if self.items.len() != self.len() || self.lengths.len() != self.len() {
            return Err(Error::shape("batch field lengths differ"));
        }
        for ((items, &len), &t) in self.items.iter().zip(&self.lengths).zip(&self.targets) {
            if len == 0 || len > items.len() {
                return Err(Error::shape(format!("bad sequence length {len}")));
            }
            if t >= item_count || items.iter().any(|&i| i >= item_count) {
                return Err(Error::shape(format!("item index out of range ({item_count} items)")));
            }
        }
        Ok(())
    }
}

/// Output of [`encode_items`], retained for the reverse pass.
pub struct EncodePass {
    /// Sequence representations, one row per batch entry.
    pub h: Array2<f64>,
    caches: Vec<SeqCache>,
}

/// Encodes each sequence with input rows taken from `item_vecs`.
pub fn encode_items(
    batch: &SequenceBatch,
    params: &EncoderParams,
    item_vecs: &Array2<f64>,
) -> Result<EncodePass> {
    batch.validate(item_vecs.nrows())?;
    let d = params.cfg.d_model;
    let mut h = Array2::zeros((batch.len(), d));
    let mut caches = Vec::with_capacity(batch.len());
    for (b, items) in batch.items.iter().enumerate() {
        let inputs = item_vecs.select(Axis(0), items);
        let (out, cache) = forward_seq(params, &inputs)?;
        h.row_mut(b).assign(&out.row(batch.lengths[b] - 1));
        caches.push(cache);
    }
    Ok(EncodePass { h, caches })
}

/// Reverse of [`encode_items`] given `dh` (gradient on the sequence
/// representations). Input-vector gradients are added to `d_items` rows.
pub fn encode_items_back(
    batch: &SequenceBatch,
    params: &EncoderParams,
    pass: &EncodePass,
    dh: &Array2<f64>,
    grads: &mut EncoderParams,
    d_items: &mut Array2<f64>,
) {
    let d = params.cfg.d_model;
    for (b, items) in batch.items.iter().enumerate() {
        let mut d_out = Array2::zeros((items.len(), d));
        d_out.row_mut(batch.lengths[b] - 1).assign(&dh.row(b));
        let dx = backward_seq(params, &pass.caches[b], &d_out, grads);
        for (j, &item) in items.iter().enumerate() {
            d_items.row_mut(item).scaled_add(1.0, &dx.row(j));
        }
    }
}

/// Sequence representations for a batch, items represented through the
/// code table.
pub fn encode(
    batch: &SequenceBatch,
    params: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
) -> Result<Array2<f64>> {
    let v = batch_item_matrix(codes, table)?;
    Ok(encode_items(batch, params, &v)?.h)
}

/// Next-item distribution over the whole catalog, `softmax(h V^T)` per row.
pub fn predict(h: &Array2<f64>, item_matrix: &Array2<f64>) -> Array2<f64> {
    softmax_rows(&h.dot(&item_matrix.t()))
}

/// Mean negative log-likelihood of `targets` and its gradient on the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let b = targets.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        grad[[i, t]] -= 1.0;
    }
    grad /= b;
    (loss / b, grad)
}

/// Parameter gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub table: CodeEmbeddingTable,
    pub encoder: EncoderParams,
}

/// Mean next-item cross-entropy of the batch.
pub fn loss(
    batch: &SequenceBatch,
    params: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
) -> Result<f64> {
    let v = batch_item_matrix(codes, table)?;
    let pass = encode_items(batch, params, &v)?;
    Ok(cross_entropy(&pass.h.dot(&v.t()), &batch.targets).0)
}

/// Loss and exact gradients with respect to every encoder parameter and
/// every table entry.
pub fn backward(
    batch: &SequenceBatch,
    params: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
) -> Result<(f64, GradientBundle)> {
    let v = batch_item_matrix(codes, table)?;
    let pass = encode_items(batch, params, &v)?;
    let (loss, dlogits) = cross_entropy(&pass.h.dot(&v.t()), &batch.targets);
    let dh = dlogits.dot(&v);
    let mut d_items = dlogits.t().dot(&pass.h);
    let mut enc_grads = params.zeros_like();
    encode_items_back(batch, params, &pass, &dh, &mut enc_grads, &mut d_items);
    let mut table_grad = table.zeros_like();
    scatter_item_grads(codes, &d_items, &mut table_grad);
    Ok((
        loss,
        GradientBundle {
            table: table_grad,
            encoder: enc_grads,
        },
    ))
}
