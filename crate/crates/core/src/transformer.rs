//! BART-style post-norm encoder, a causal generative decoder with
//! cross-attention, and the small query-based classification decoder.
//!
//! Parameter names are fixed by the `*_layout` functions. A model is built by
//! materializing a layout, and parameter accounting can be done on a layout
//! alone, which lets the bart-large-sized configuration be counted without
//! allocating it.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Init, ParamStore, Result as TensorResult, Tensor, TensorError, Var};

pub const INIT_STD: f32 = 0.02;
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub gen_dec_layers: usize,
    pub cls_dec_layers: usize,
    /// Learned query tokens in each classification decoder.
    pub n_queries: usize,
    pub max_seq_len: usize,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    Heads { d_model: usize, n_heads: usize },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("special token ids must be distinct and below vocab_size {0}")]
    SpecialIds(usize),
}

impl ModelConfig {
    /// Desk-scale preset used by tests and the default CLI runs.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            gen_dec_layers: 2,
            cls_dec_layers: 2,
            n_queries: 1,
            max_seq_len: 128,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Six encoder and six generative-decoder layers at bart-base width.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 768,
            n_heads: 12,
            ffn_dim: 3072,
            enc_layers: 6,
            gen_dec_layers: 6,
            cls_dec_layers: 2,
            n_queries: 1,
            max_seq_len: 1024,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// bart-large dimensions with its 50265-token vocabulary.
    pub fn bart_large_like() -> Self {
        Self {
            vocab_size: 50265,
            d_model: 1024,
            n_heads: 16,
            ffn_dim: 4096,
            enc_layers: 12,
            gen_dec_layers: 12,
            cls_dec_layers: 2,
            n_queries: 1,
            max_seq_len: 1024,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny(vocab_size)),
            "small" => Some(Self::small(vocab_size)),
            "bart-large-like" => Some(Self::bart_large_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.vocab_size, "vocab_size"),
            (self.d_model, "d_model"),
            (self.n_heads, "n_heads"),
            (self.ffn_dim, "ffn_dim"),
            (self.n_queries, "n_queries"),
            (self.max_seq_len, "max_seq_len"),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::Heads {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        let ids = [self.pad_id, self.bos_id, self.eos_id];
        if ids.iter().any(|&i| i >= self.vocab_size) || ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(ConfigError::SpecialIds(self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ── Layouts ──────────────────────────────────────────────────────────

/// One parameter slot: name, shape and initialization rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn push(layout: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    layout.push(ParamSpec { name, shape, init });
}

fn linear(layout: &mut Vec<ParamSpec>, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    push(layout, format!("{prefix}.{w}"), vec![fan_in, fan_out], Init::Normal(INIT_STD));
    push(layout, format!("{prefix}.{b}"), vec![fan_out], Init::Zeros);
}

fn attention_layout(layout: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
        linear(layout, prefix, w, b, d, d);
    }
}

fn norm_layout(layout: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    push(layout, format!("{prefix}.gamma"), vec![d], Init::Ones);
    push(layout, format!("{prefix}.beta"), vec![d], Init::Zeros);
}

fn ffn_layout(layout: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize) {
    linear(layout, prefix, "w1", "b1", d, f);
    linear(layout, prefix, "w2", "b2", f, d);
}

pub const ENCODER_PREFIX: &str = "encoder";
pub const EMBED_TOKENS: &str = "encoder.embed_tokens";

pub fn decoder_prefix(task: &str) -> String {
    format!("decoder.{task}")
}

/// Shared token embedding, positions, embedding norm, then `enc_layers`
/// blocks of self-attention and FFN, each followed by a norm.
pub fn encoder_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut l = Vec::new();
    push(&mut l, EMBED_TOKENS.into(), vec![cfg.vocab_size, d], Init::Normal(INIT_STD));
    push(&mut l, "encoder.embed_positions".into(), vec![cfg.max_seq_len, d], Init::Normal(INIT_STD));
    norm_layout(&mut l, "encoder.ln_emb", d);
    for i in 0..cfg.enc_layers {
        let p = format!("encoder.layer{i}");
        attention_layout(&mut l, &format!("{p}.self_attn"), d);
        norm_layout(&mut l, &format!("{p}.ln1"), d);
        ffn_layout(&mut l, &format!("{p}.ffn"), d, cfg.ffn_dim);
        norm_layout(&mut l, &format!("{p}.ln2"), d);
    }
    l
}

fn decoder_block_layout(l: &mut Vec<ParamSpec>, p: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    attention_layout(l, &format!("{p}.self_attn"), d);
    norm_layout(l, &format!("{p}.ln1"), d);
    attention_layout(l, &format!("{p}.cross_attn"), d);
    norm_layout(l, &format!("{p}.ln2"), d);
    ffn_layout(l, &format!("{p}.ffn"), d, cfg.ffn_dim);
    norm_layout(l, &format!("{p}.ln3"), d);
}

/// The LM head and input embedding are the encoder's shared token table, so
/// the generative decoder owns only positions, norms and blocks.
pub fn generative_decoder_layout(cfg: &ModelConfig, task: &str, layers: usize) -> Vec<ParamSpec> {
    let prefix = decoder_prefix(task);
    let mut l = Vec::new();
    push(
        &mut l,
        format!("{prefix}.embed_positions"),
        vec![cfg.max_seq_len, cfg.d_model],
        Init::Normal(INIT_STD),
    );
    norm_layout(&mut l, &format!("{prefix}.ln_emb"), cfg.d_model);
    for i in 0..layers {
        decoder_block_layout(&mut l, &format!("{prefix}.layer{i}"), cfg);
    }
    l
}

pub fn classification_decoder_layout(cfg: &ModelConfig, task: &str, layers: usize, n_labels: usize) -> Vec<ParamSpec> {
    let prefix = decoder_prefix(task);
    let mut l = Vec::new();
    push(
        &mut l,
        format!("{prefix}.query"),
        vec![cfg.n_queries, cfg.d_model],
        Init::Normal(INIT_STD),
    );
    for i in 0..layers {
        decoder_block_layout(&mut l, &format!("{prefix}.layer{i}"), cfg);
    }
    linear(&mut l, &format!("{prefix}.head"), "w", "b", cfg.d_model, n_labels);
    l
}

/// Allocates every slot of `layout`, drawing random values in layout order.
pub fn materialize<R: Rng + ?Sized>(layout: &[ParamSpec], trainable: bool, rng: &mut R) -> TensorResult<ParamStore> {
    let mut store = ParamStore::new();
    for spec in layout {
        let t = spec.init.materialize(&spec.shape, rng).with_requires_grad(trainable);
        store.insert(spec.name.clone(), t)?;
    }
    Ok(store)
}

pub fn layout_numel(layout: &[ParamSpec]) -> usize {
    layout.iter().map(ParamSpec::numel).sum()
}

// ── Attention ────────────────────────────────────────────────────────

/// Boolean `[tq, tk]` mask; `true` marks a key the query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(tq: usize, tk: usize, allowed: Vec<bool>) -> TensorResult<Self> {
        if allowed.len() != tq * tk {
            return Err(TensorError::Length {
                left: allowed.len(),
                right: tq * tk,
            });
        }
        Ok(Self { tq, tk, allowed })
    }

    pub fn full(tq: usize, tk: usize) -> Self {
        Self {
            tq,
            tk,
            allowed: vec![true; tq * tk],
        }
    }

    pub fn causal(t: usize) -> Self {
        let allowed = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        Self { tq: t, tk: t, allowed }
    }

    /// Every query may see exactly the keys flagged valid.
    pub fn from_key_validity(tq: usize, valid: &[bool]) -> Self {
        let allowed = (0..tq).flat_map(|_| valid.iter().copied()).collect();
        Self {
            tq,
            tk: valid.len(),
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tq, self.tk)
    }

    fn additive(&self) -> TensorResult<Tensor> {
        if let Some(row) = (0..self.tq).find(|&i| !self.allowed[i * self.tk..(i + 1) * self.tk].contains(&true)) {
            return Err(TensorError::NoValidKey(row));
        }
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.tq, self.tk], data)
    }

    fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

/// Projection weights of one attention block, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnWeights {
    pub fn load<'p>(g: &mut Graph<'p>, store: &'p ParamStore, prefix: &str) -> TensorResult<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

fn affine(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> TensorResult<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Scaled dot-product attention with `n_heads` heads, concatenated and
/// output-projected. Masked keys receive exactly zero weight.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    w: &AttnWeights,
    query: Var,
    key: Var,
    value: Var,
    mask: &AttnMask,
    n_heads: usize,
) -> TensorResult<Var> {
    let (tq, d) = (g.shape(query)[0], g.shape(query)[1]);
    let tk = g.shape(key)[0];
    if mask.shape() != (tq, tk) {
        return Err(TensorError::Shape {
            op: "attention mask",
            lhs: vec![mask.tq, mask.tk],
            rhs: vec![tq, tk],
        });
    }
    let additive = if mask.is_full() {
        None
    } else {
        Some(g.constant(mask.additive()?))
    };
    let q = affine(g, query, w.wq, w.bq)?;
    let k = affine(g, key, w.wk, w.bk)?;
    let v = affine(g, value, w.wv, w.bv)?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = additive {
            scores = g.add(scores, m)?;
        }
        let probs = g.softmax(scores, 1)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    affine(g, ctx, w.wo, w.bo)
}

// ── Blocks ───────────────────────────────────────────────────────────

fn norm<'p>(g: &mut Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> TensorResult<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn ffn<'p>(g: &mut Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> TensorResult<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = affine(g, x, w1, b1)?;
    let h = g.gelu(h);
    affine(g, h, w2, b2)
}

/// `norm(x + sublayer(x))`
fn residual_norm<'p>(g: &mut Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var, y: Var) -> TensorResult<Var> {
    let s = g.add(x, y)?;
    norm(g, store, prefix, s)
}

fn self_attention_block<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
    mask: &AttnMask,
    n_heads: usize,
) -> TensorResult<Var> {
    let w = AttnWeights::load(g, store, prefix)?;
    multi_head_attention(g, &w, x, x, x, mask, n_heads)
}

#[allow(clippy::too_many_arguments)]
fn decoder_block<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
    memory: Var,
    self_mask: &AttnMask,
    cross_mask: &AttnMask,
    n_heads: usize,
) -> TensorResult<Var> {
    let a = self_attention_block(g, store, &format!("{prefix}.self_attn"), x, self_mask, n_heads)?;
    let x = residual_norm(g, store, &format!("{prefix}.ln1"), x, a)?;
    let w = AttnWeights::load(g, store, &format!("{prefix}.cross_attn"))?;
    let c = multi_head_attention(g, &w, x, memory, memory, cross_mask, n_heads)?;
    let x = residual_norm(g, store, &format!("{prefix}.ln2"), x, c)?;
    let f = ffn(g, store, &format!("{prefix}.ffn"), x)?;
    residual_norm(g, store, &format!("{prefix}.ln3"), x, f)
}

// ── Encoder ──────────────────────────────────────────────────────────

/// Encoder hidden states for one context. Immutable once produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub mask: Vec<bool>,
    pub fingerprint: Arc<str>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[usize], what: &'static str) -> TensorResult<()> {
    if ids.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: vec![0],
            len: 0,
        });
    }
    if ids.len() > cfg.max_seq_len {
        return Err(TensorError::Shape {
            op: what,
            lhs: vec![ids.len()],
            rhs: vec![cfg.max_seq_len],
        });
    }
    Ok(())
}

/// Encoder forward on the tape; returns the `[T, d_model]` hidden states.
pub fn encoder_graph<'p>(g: &mut Graph<'p>, cfg: &ModelConfig, enc: &'p ParamStore, ids: &[usize]) -> TensorResult<Var> {
    check_ids(cfg, ids, "encoder input length")?;
    let table = g.param(enc, EMBED_TOKENS)?;
    let pos_table = g.param(enc, "encoder.embed_positions")?;
    let tok = g.embedding(ids, table)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embedding(&positions, pos_table)?;
    let x = g.add(tok, pos)?;
    let mut x = norm(g, enc, "encoder.ln_emb", x)?;
    let mask = AttnMask::full(ids.len(), ids.len());
    for i in 0..cfg.enc_layers {
        let p = format!("encoder.layer{i}");
        let a = self_attention_block(g, enc, &format!("{p}.self_attn"), x, &mask, cfg.n_heads)?;
        x = residual_norm(g, enc, &format!("{p}.ln1"), x, a)?;
        let f = ffn(g, enc, &format!("{p}.ffn"), x)?;
        x = residual_norm(g, enc, &format!("{p}.ln2"), x, f)?;
    }
    Ok(x)
}

/// Gradient-free encoder pass.
pub fn encoder_forward(
    cfg: &ModelConfig,
    enc: &ParamStore,
    ids: &[usize],
    fingerprint: Arc<str>,
) -> TensorResult<EncoderOutput> {
    let mut g = Graph::no_grad();
    let h = encoder_graph(&mut g, cfg, enc, ids)?;
    Ok(EncoderOutput {
        hidden: g.value(h).clone(),
        mask: vec![true; ids.len()],
        fingerprint,
    })
}

// ── Decoders ─────────────────────────────────────────────────────────

/// Teacher-forced generative decoder on the tape; returns `[T_dec, vocab]` logits.
///
/// `shared` provides the token table used both as input embedding and as the
/// tied LM head.
#[allow(clippy::too_many_arguments)]
pub fn generative_decoder_graph<'p>(
    g: &mut Graph<'p>,
    cfg: &ModelConfig,
    shared: &'p ParamStore,
    dec: &'p ParamStore,
    task: &str,
    layers: usize,
    dec_ids: &[usize],
    memory: Var,
    memory_mask: &[bool],
) -> TensorResult<Var> {
    check_ids(cfg, dec_ids, "decoder input length")?;
    let prefix = decoder_prefix(task);
    let table = g.param(shared, EMBED_TOKENS)?;
    let pos_table = g.param(dec, &format!("{prefix}.embed_positions"))?;
    let tok = g.embedding(dec_ids, table)?;
    let positions: Vec<usize> = (0..dec_ids.len()).collect();
    let pos = g.embedding(&positions, pos_table)?;
    let x = g.add(tok, pos)?;
    let mut x = norm(g, dec, &format!("{prefix}.ln_emb"), x)?;
    let t = dec_ids.len();
    let self_mask = AttnMask::causal(t);
    let cross_mask = AttnMask::from_key_validity(t, memory_mask);
    for i in 0..layers {
        x = decoder_block(
            g,
            dec,
            &format!("{prefix}.layer{i}"),
            x,
            memory,
            &self_mask,
            &cross_mask,
            cfg.n_heads,
        )?;
    }
    g.matmul_nt(x, table)
}

/// Classification decoder on the tape; returns `[n_labels]` logits.
pub fn classification_decoder_graph<'p>(
    g: &mut Graph<'p>,
    cfg: &ModelConfig,
    dec: &'p ParamStore,
    task: &str,
    layers: usize,
    memory: Var,
    memory_mask: &[bool],
) -> TensorResult<Var> {
    let prefix = decoder_prefix(task);
    let mut x = g.param(dec, &format!("{prefix}.query"))?;
    let nq = g.shape(x)[0];
    let self_mask = AttnMask::full(nq, nq);
    let cross_mask = AttnMask::from_key_validity(nq, memory_mask);
    for i in 0..layers {
        x = decoder_block(
            g,
            dec,
            &format!("{prefix}.layer{i}"),
            x,
            memory,
            &self_mask,
            &cross_mask,
            cfg.n_heads,
        )?;
    }
    if nq > 1 {
        let avg = g.constant(Tensor::full(&[1, nq], 1.0 / nq as f32)?);
        x = g.matmul(avg, x)?;
    }
    let w = g.param(dec, &format!("{prefix}.head.w"))?;
    let b = g.param(dec, &format!("{prefix}.head.b"))?;
    let logits = affine(g, x, w, b)?;
    let n = g.shape(logits)[1];
    g.reshape(logits, vec![n])
}

/// Gradient-free generative decoder pass over `dec_ids`.
pub fn generative_decoder_forward(
    cfg: &ModelConfig,
    shared: &ParamStore,
    dec: &ParamStore,
    task: &str,
    layers: usize,
    dec_ids: &[usize],
    enc: &EncoderOutput,
) -> TensorResult<Tensor> {
    let mut g = Graph::no_grad();
    let memory = g.constant_ref(&enc.hidden);
    let logits = generative_decoder_graph(&mut g, cfg, shared, dec, task, layers, dec_ids, memory, &enc.mask)?;
    Ok(g.value(logits).clone())
}

/// Gradient-free classification decoder pass.
pub fn classification_decoder_forward(
    cfg: &ModelConfig,
    dec: &ParamStore,
    task: &str,
    layers: usize,
    enc: &EncoderOutput,
) -> TensorResult<Tensor> {
    let mut g = Graph::no_grad();
    let memory = g.constant_ref(&enc.hidden);
    let logits = classification_decoder_graph(&mut g, cfg, dec, task, layers, memory, &enc.mask)?;
    Ok(g.value(logits).clone())
}
