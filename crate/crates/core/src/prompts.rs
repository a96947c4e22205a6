//! Soft prompts for per-domain tuning on top of a frozen sequence encoder.
//!
//! The domain prompt is a learned context matrix that the sequence
//! representations attend over. The user prompt encodes the user's history
//! of domain-local item ids with a separate small encoder. Full mode fuses
//! both prompts with the sequence representation through an affine head;
//! light mode adds the attended domain prompt to it.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use crate::code_model::{batch_item_matrix, scatter_item_grads, CodeEmbeddingTable};
use crate::coder::ItemCode;
use crate::encoder::{
    backward_seq, cross_entropy, encode_items, encode_items_back, forward_seq, EncoderConfig,
    EncoderParams, SeqCache, SequenceBatch,
};
use crate::error::{Error, Result};
use crate::nn::{attention, attention_back, tmut, tref, uniform2, AttnCache, Parameters, TensorMut, TensorRef};

const INIT_RANGE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Full,
    Light,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PromptMode::Full),
            "light" => Ok(PromptMode::Light),
            _ => Err(Error::config(format!(
                "unknown prompt mode {s:?} (expected full or light)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::Full => "full",
            PromptMode::Light => "light",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// Number of context words in the domain prompt.
    pub context_words: usize,
    pub heads: usize,
    pub upe_layers: usize,
    pub upe_heads: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: PromptMode::Light,
            context_words: 1024,
            heads: 4,
            upe_layers: 1,
            upe_heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrompt {
    pub context: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserPromptEncoder {
    /// One row per domain-local item id.
    pub ids: Array2<f64>,
    pub encoder: EncoderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// `3d x d`, applied to `[p_dom | p_user | h]`.
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

impl FusionHead {
    /// `[0 | 0 | I]` with zero bias: passes the sequence representation
    /// through unchanged.
    pub fn passthrough(d: usize) -> Self {
        let mut wc = Array2::zeros((3 * d, d));
        wc.slice_mut(s![2 * d.., ..]).assign(&Array2::eye(d));
        FusionHead {
            wc,
            bc: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub mode: PromptMode,
    pub heads: usize,
    pub domain: DomainPrompt,
    pub user: Option<UserPromptEncoder>,
    pub head: Option<FusionHead>,
}

impl PromptSet {
    /// Fresh prompts that leave the frozen model's predictions unchanged:
    /// light mode starts with a zero output projection, full mode with the
    /// pass-through fusion head. Everything else is uniform in +-0.02.
    pub fn init(
        cfg: &PromptConfig,
        d: usize,
        item_count: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.context_words == 0 {
            return Err(Error::config("prompt context word count must be positive"));
        }
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::config(format!(
                "prompt head count {} does not divide hidden size {d}",
                cfg.heads
            )));
        }
        let mut domain = DomainPrompt {
            context: uniform2(cfg.context_words, d, INIT_RANGE, rng),
            wq: uniform2(d, d, INIT_RANGE, rng),
            wk: uniform2(d, d, INIT_RANGE, rng),
            wv: uniform2(d, d, INIT_RANGE, rng),
            wo: uniform2(d, d, INIT_RANGE, rng),
        };
        let (user, head) = match cfg.mode {
            PromptMode::Light => {
                domain.wo.fill(0.0);
                (None, None)
            }
            PromptMode::Full => {
                let enc_cfg = EncoderConfig {
                    d_model: d,
                    heads: cfg.upe_heads,
                    layers: cfg.upe_layers,
                    max_len,
                };
                let user = UserPromptEncoder {
                    ids: uniform2(item_count, d, INIT_RANGE, rng),
                    encoder: EncoderParams::init(enc_cfg, rng)?,
                };
                (Some(user), Some(FusionHead::passthrough(d)))
            }
        };
        Ok(PromptSet {
            mode: cfg.mode,
            heads: cfg.heads,
            domain,
            user,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for PromptSet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        tref(&mut v, "domain.context", &self.domain.context);
        tref(&mut v, "domain.wq", &self.domain.wq);
        tref(&mut v, "domain.wk", &self.domain.wk);
        tref(&mut v, "domain.wv", &self.domain.wv);
        tref(&mut v, "domain.wo", &self.domain.wo);
        if let Some(u) = &self.user {
            tref(&mut v, "user.ids", &u.ids);
            for mut t in u.encoder.tensors() {
                t.name = format!("user.encoder.{}", t.name);
                v.push(t);
            }
        }
        if let Some(h) = &self.head {
            tref(&mut v, "fusion.wc", &h.wc);
            tref(&mut v, "fusion.bc", &h.bc);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        tmut(&mut v, "domain.context", &mut self.domain.context);
        tmut(&mut v, "domain.wq", &mut self.domain.wq);
        tmut(&mut v, "domain.wk", &mut self.domain.wk);
        tmut(&mut v, "domain.wv", &mut self.domain.wv);
        tmut(&mut v, "domain.wo", &mut self.domain.wo);
        if let Some(u) = &mut self.user {
            tmut(&mut v, "user.ids", &mut u.ids);
            for mut t in u.encoder.tensors_mut() {
                t.name = format!("user.encoder.{}", t.name);
                v.push(t);
            }
        }
        if let Some(h) = &mut self.head {
            tmut(&mut v, "fusion.wc", &mut h.wc);
            tmut(&mut v, "fusion.bc", &mut h.bc);
        }
        v
    }
}

struct DomainCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    ctx: Array2<f64>,
}

fn attend_forward(h: &Array2<f64>, dp: &DomainPrompt, heads: usize) -> (Array2<f64>, DomainCache) {
    let q = h.dot(&dp.wq);
    let k = dp.context.dot(&dp.wk);
    let v = dp.context.dot(&dp.wv);
    let (ctx, attn) = attention(&q, &k, &v, heads, false);
    let out = ctx.dot(&dp.wo);
    (out, DomainCache { q, k, v, attn, ctx })
}

fn attend_backward(
    h: &Array2<f64>,
    dp: &DomainPrompt,
    cache: &DomainCache,
    d_out: &Array2<f64>,
    grads: &mut DomainPrompt,
) -> Array2<f64> {
    grads.wo += &cache.ctx.t().dot(d_out);
    let d_ctx = d_out.dot(&dp.wo.t());
    let (dq, dk, dv) = attention_back(&d_ctx, &cache.q, &cache.k, &cache.v, &cache.attn);
    grads.wq += &h.t().dot(&dq);
    grads.wk += &dp.context.t().dot(&dk);
    grads.wv += &dp.context.t().dot(&dv);
    grads.context += &dk.dot(&dp.wk.t());
    grads.context += &dv.dot(&dp.wv.t());
    dq.dot(&dp.wq.t())
}

/// Multi-head cross-attention of each sequence representation (a query)
/// over the prompt's context words; one `d` vector per row of `h`.
pub fn domain_prompt_attend(h: &Array2<f64>, dp: &DomainPrompt, heads: usize) -> Array2<f64> {
    attend_forward(h, dp, heads).0
}

/// Per-head attention weights over the context words for each query row.
pub fn domain_prompt_weights(h: &Array2<f64>, dp: &DomainPrompt, heads: usize) -> Vec<Array2<f64>> {
    let (_, cache) = attend_forward(h, dp, heads);
    (0..heads).map(|i| cache.attn.weights(i).clone()).collect()
}

/// Encodes one history of domain-local item ids and reads the last position.
pub fn user_prompt(ids: &[usize], upe: &UserPromptEncoder) -> Result<Array1<f64>> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= upe.ids.nrows()) {
        return Err(Error::ItemOutOfRange {
            item: bad.to_string(),
            count: upe.ids.nrows(),
        });
    }
    let (out, _) = forward_seq(&upe.encoder, &upe.ids.select(Axis(0), ids))?;
    Ok(out.row(ids.len() - 1).to_owned())
}

/// `[p_dom | p_user | h] W^C + b^C`, row-wise.
pub fn fuse_full(
    p_dom: &Array2<f64>,
    p_user: &Array2<f64>,
    h: &Array2<f64>,
    head: &FusionHead,
) -> Array2<f64> {
    let cat = concatenate![Axis(1), *p_dom, *p_user, *h];
    cat.dot(&head.wc) + &head.bc
}

pub fn fuse_light(p_dom: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    p_dom + h
}

struct UserCache {
    caches: Vec<SeqCache>,
}

/// Forward state of a prompted batch.
pub struct PromptPass {
    /// Fused representations, one row per sequence.
    pub fused: Array2<f64>,
    item_matrix: Array2<f64>,
    seq: crate::encoder::EncodePass,
    domain: DomainCache,
    p_dom: Array2<f64>,
    p_user: Option<(Array2<f64>, UserCache)>,
}

pub fn prompt_forward(
    batch: &SequenceBatch,
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: &PromptSet,
) -> Result<PromptPass> {
    let item_matrix = batch_item_matrix(codes, table)?;
    let seq = encode_items(batch, encoder, &item_matrix)?;
    let h = &seq.h;
    if h.ncols() != prompts.domain.wq.nrows() {
        return Err(Error::shape("prompt and encoder widths differ"));
    }
    let (p_dom, domain) = attend_forward(h, &prompts.domain, prompts.heads);
    let (fused, p_user) = match (prompts.mode, &prompts.user, &prompts.head) {
        (PromptMode::Light, _, _) => (fuse_light(&p_dom, h), None),
        (PromptMode::Full, Some(upe), Some(head)) => {
            if upe.ids.nrows() != codes.len() {
                return Err(Error::shape(format!(
                    "user prompt covers {} items, domain has {}",
                    upe.ids.nrows(),
                    codes.len()
                )));
            }
            let d = h.ncols();
            let mut pu = Array2::zeros((batch.len(), d));
            let mut caches = Vec::with_capacity(batch.len());
            for (b, items) in batch.items.iter().enumerate() {
                let (out, cache) = forward_seq(&upe.encoder, &upe.ids.select(Axis(0), items))?;
                pu.row_mut(b).assign(&out.row(batch.lengths[b] - 1));
                caches.push(cache);
            }
            let fused = fuse_full(&p_dom, &pu, h, head);
            (fused, Some((pu, UserCache { caches })))
        }
        (PromptMode::Full, _, _) => {
            return Err(Error::shape("full prompt mode without user encoder or fusion head"))
        }
    };
    Ok(PromptPass {
        fused,
        item_matrix,
        seq,
        domain,
        p_dom,
        p_user,
    })
}

/// Logits `fused V^T` of a prompted batch.
pub fn prompt_scores(
    batch: &SequenceBatch,
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: &PromptSet,
) -> Result<Array2<f64>> {
    let pass = prompt_forward(batch, encoder, table, codes, prompts)?;
    Ok(pass.fused.dot(&pass.item_matrix.t()))
}

pub fn prompt_predict(fused: &Array2<f64>, item_matrix: &Array2<f64>) -> Array2<f64> {
    crate::encoder::predict(fused, item_matrix)
}

pub fn prompt_loss(
    batch: &SequenceBatch,
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: &PromptSet,
) -> Result<f64> {
    let logits = prompt_scores(batch, encoder, table, codes, prompts)?;
    Ok(cross_entropy(&logits, &batch.targets).0)
}

/// Loss plus gradients for the table and every prompt parameter. The
/// encoder is treated as fixed; gradients flow through it to the table.
pub fn prompt_backward(
    batch: &SequenceBatch,
    encoder: &EncoderParams,
    table: &CodeEmbeddingTable,
    codes: &[ItemCode],
    prompts: &PromptSet,
) -> Result<(f64, CodeEmbeddingTable, PromptSet)> {
    let pass = prompt_forward(batch, encoder, table, codes, prompts)?;
    let v = &pass.item_matrix;
    let (loss, dlogits) = cross_entropy(&pass.fused.dot(&v.t()), &batch.targets);
    let d_fused = dlogits.dot(v);
    let mut d_items = dlogits.t().dot(&pass.fused);
    let mut grads = prompts.zeros_like();
    let h = &pass.seq.h;
    let d = h.ncols();

    let (d_pdom, mut dh) = match prompts.mode {
        PromptMode::Light => (d_fused.clone(), d_fused),
        PromptMode::Full => {
            let head = prompts.head.as_ref().expect("checked in forward");
            let (pu, ucache) = pass.p_user.as_ref().expect("checked in forward");
            let cat = concatenate![Axis(1), pass.p_dom, *pu, *h];
            let g_head = grads.head.as_mut().expect("same shape as prompts");
            g_head.wc += &cat.t().dot(&d_fused);
            g_head.bc += &d_fused.sum_axis(Axis(0));
            let d_cat = d_fused.dot(&head.wc.t());
            let d_pu = d_cat.slice(s![.., d..2 * d]).to_owned();

            let upe = prompts.user.as_ref().expect("checked in forward");
            let g_user = grads.user.as_mut().expect("same shape as prompts");
            for (b, items) in batch.items.iter().enumerate() {
                let mut d_out = Array2::zeros((items.len(), d));
                d_out.row_mut(batch.lengths[b] - 1).assign(&d_pu.row(b));
                let dx = backward_seq(&upe.encoder, &ucache.caches[b], &d_out, &mut g_user.encoder);
                for (j, &item) in items.iter().enumerate() {
                    g_user.ids.row_mut(item).scaled_add(1.0, &dx.row(j));
                }
            }
            (
                d_cat.slice(s![.., ..d]).to_owned(),
                d_cat.slice(s![.., 2 * d..]).to_owned(),
            )
        }
    };
    dh += &attend_backward(h, &prompts.domain, &pass.domain, &d_pdom, &mut grads.domain);

    let mut scratch = encoder.zeros_like();
    encode_items_back(batch, encoder, &pass.seq, &dh, &mut scratch, &mut d_items);
    let mut table_grad = table.zeros_like();
    scatter_item_grads(codes, &d_items, &mut table_grad);
    Ok((loss, table_grad, grads))
}
