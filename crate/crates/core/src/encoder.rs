//! Gated multi-head attention MIL slide encoder and cross-model fusion.
//!
//! A bag of `N` patch embeddings of width `D` is resized to the unified width,
//! layer-normalized, and split into contiguous per-head slices. Each head
//! scores patches with a gated attention network
//! `c · (tanh(x·a + a_b) ⊙ sigmoid(x·b + b_b))`; the head scores are averaged
//! and softmax-normalized over patches. The weights then pool both the
//! processed (unified) features and the raw input features.

use crate::error::{bail, Result};
use crate::params::{rebuild, trunc_normal, Linear, ParamTree, INIT_STD};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Bag-size cap applied when sampling patches for training.
pub const DEFAULT_MAX_PATCHES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayout {
    pub unified_dim: usize,
    pub n_heads: usize,
    /// Hidden width of each head's gated attention network.
    pub attn_hidden: usize,
    pub ln_eps: f64,
}

impl AttentionLayout {
    /// 8 heads of 96 features over a 768-wide unified space.
    pub fn paper() -> Self {
        Self::scaled(768)
    }

    /// Eight heads with `head_dim = unified_dim / 8` and matching hidden width.
    pub fn scaled(unified_dim: usize) -> Self {
        Self {
            unified_dim,
            n_heads: 8,
            attn_hidden: unified_dim / 8,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.unified_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.unified_dim == 0 || self.attn_hidden == 0 {
            bail!(Config, "attention layout has a zero dimension: {:?}", self);
        }
        if self.n_heads * self.head_dim() != self.unified_dim {
            bail!(
                Config,
                "unified_dim {} is not divisible into {} heads",
                self.unified_dim,
                self.n_heads
            );
        }
        if self.ln_eps <= 0.0 {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }
}

/// One head's gated attention network.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub a: Linear<T>,
    pub b: Linear<T>,
    /// `attn_hidden × 1` scoring vector; no bias, softmax would cancel it.
    pub c: T,
}

impl<T> HeadParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> HeadParams<U> {
        HeadParams {
            a: self.a.map(&format!("{prefix}/a"), f),
            b: self.b.map(&format!("{prefix}/b"), f),
            c: f(format!("{prefix}/c"), &self.c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layout: AttentionLayout,
    pub ln_gamma: T,
    pub ln_beta: T,
    pub heads: Vec<HeadParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            layout: self.layout,
            ln_gamma: f(format!("{prefix}/ln_gamma"), &self.ln_gamma),
            ln_beta: f(format!("{prefix}/ln_beta"), &self.ln_beta),
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.map(&format!("{prefix}/head{i}"), f))
                .collect(),
        }
    }
}

impl EncoderParams<Tensor> {
    /// Weights from a ±2σ truncated normal with σ = 0.02, zero biases,
    /// unit gamma and zero beta.
    pub fn init<R: Rng + ?Sized>(layout: AttentionLayout, rng: &mut R) -> Result<Self> {
        layout.validate()?;
        let (hd, h) = (layout.head_dim(), layout.attn_hidden);
        let heads = (0..layout.n_heads)
            .map(|_| HeadParams {
                a: Linear::init(rng, hd, h),
                b: Linear::init(rng, hd, h),
                c: trunc_normal(rng, vec![h, 1], INIT_STD),
            })
            .collect();
        Ok(Self {
            layout,
            ln_gamma: Tensor::full(vec![layout.unified_dim], 1.0),
            ln_beta: Tensor::zeros(vec![layout.unified_dim]),
            heads,
        })
    }
}

impl ParamTree for EncoderParams<Tensor> {
    type Bound = EncoderParams<Var>;

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.map("enc", &mut |n, t| out.push((n, t)));
        out
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        rebuild(self, tensors, |t, f| t.map("enc", f), &self.named())
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> EncoderParams<Var> {
        self.map("enc", &mut |_, t| tape.leaf(t.clone(), requires_grad))
    }

    fn grads_of(bound: &EncoderParams<Var>, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        bound.map("enc", &mut |_, v| out.push(grads.tensor(*v)));
        out
    }
}

/// One slide's patch embeddings from one tile-level model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub slide_id: String,
    /// Position of the source model in the configured model order.
    pub model: usize,
    pub embeddings: Tensor,
}

impl PatchBag {
    pub fn new(slide_id: impl Into<String>, model: usize, embeddings: Tensor) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            bail!(Dimension, "bag embeddings must be N×D, got {:?}", embeddings.shape());
        }
        Ok(Self {
            slide_id: slide_id.into(),
            model,
            embeddings,
        })
    }

    /// Builds a bag from rows; empty bags are contract errors and non-finite
    /// values data errors.
    pub fn from_rows(slide_id: impl Into<String>, model: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            bail!(Contract, "empty patch bag");
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            bail!(Data, "non-finite patch embedding");
        }
        Self::new(slide_id, model, Tensor::from_rows(rows)?)
    }

    pub fn n_patches(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// The bag restricted to the given patch indices.
    pub fn subset(&self, idx: &[usize]) -> Result<PatchBag> {
        Ok(PatchBag {
            slide_id: self.slide_id.clone(),
            model: self.model,
            embeddings: self.embeddings.select_rows(idx)?,
        })
    }
}

/// Handles to one encoded view on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    /// `1×unified_dim` attention-pooled processed features.
    pub s_unified: Var,
    /// `1×D` attention-pooled raw features.
    pub s_raw: Var,
    /// `1×N` post-softmax weights.
    pub attention: Var,
    /// `1×N` head-averaged scores before the softmax.
    pub logits: Var,
}

/// Records the encoder forward pass for one bag of raw embeddings.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    embeddings: &Tensor,
) -> Result<ViewVars> {
    let layout = params.layout;
    let (n, _) = embeddings.dims2()?;
    if n == 0 {
        bail!(Contract, "empty patch bag");
    }
    let raw = tape.constant(embeddings.clone());
    let resized = tape.resize_linear(raw, layout.unified_dim)?;
    let unified = tape.layer_norm(resized, params.ln_gamma, params.ln_beta, layout.ln_eps)?;
    let hd = layout.head_dim();
    let mut head_scores = Vec::with_capacity(params.heads.len());
    for (i, head) in params.heads.iter().enumerate() {
        let slice = tape.slice_cols(unified, i * hd, (i + 1) * hd)?;
        let ta = head.a.forward(tape, slice)?;
        let ta = tape.tanh(ta)?;
        let gb = head.b.forward(tape, slice)?;
        let gb = tape.sigmoid(gb)?;
        let gated = tape.hadamard(ta, gb)?;
        head_scores.push(tape.matmul(gated, head.c)?);
    }
    let stacked = tape.concat(&head_scores, 1)?;
    let mean = tape.mean_axis(stacked, 1)?;
    let logits = tape.transpose(mean)?;
    let attention = tape.softmax_rows(logits)?;
    let s_unified = tape.matmul(attention, unified)?;
    let s_raw = tape.matmul(attention, raw)?;
    Ok(ViewVars {
        s_unified,
        s_raw,
        attention,
        logits,
    })
}

/// Per-model slide embedding produced by [`encode_bag`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlideViewEmbedding {
    pub model: usize,
    pub s_unified: Vec<f64>,
    pub s_raw: Vec<f64>,
    pub attention: Vec<f64>,
}

fn check_bag(bag: &PatchBag) -> Result<()> {
    if bag.n_patches() == 0 {
        bail!(Contract, "empty patch bag");
    }
    if bag.embeddings.data().iter().any(|v| !v.is_finite()) {
        bail!(Data, "non-finite embedding in slide {}", bag.slide_id);
    }
    Ok(())
}

pub fn encode_bag(bag: &PatchBag, params: &EncoderParams<Tensor>) -> Result<SlideViewEmbedding> {
    check_bag(bag)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let v = encode_on_tape(&mut tape, &bound, &bag.embeddings)?;
    Ok(SlideViewEmbedding {
        model: bag.model,
        s_unified: tape.value(v.s_unified).data().to_vec(),
        s_raw: tape.value(v.s_raw).data().to_vec(),
        attention: tape.value(v.attention).data().to_vec(),
    })
}

/// Post-softmax attention weights over the patches of `bag`.
pub fn attention_scores(bag: &PatchBag, params: &EncoderParams<Tensor>) -> Result<Vec<f64>> {
    Ok(encode_bag(bag, params)?.attention)
}

/// Head-averaged attention scores before the softmax.
pub fn attention_logits(bag: &PatchBag, params: &EncoderParams<Tensor>) -> Result<Vec<f64>> {
    check_bag(bag)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let v = encode_on_tape(&mut tape, &bound, &bag.embeddings)?;
    Ok(tape.value(v.logits).data().to_vec())
}

/// Fused multi-model slide representation.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideRepresentation {
    /// One view per model, in model order.
    pub per_model: Vec<SlideViewEmbedding>,
    /// `[s_unified_0; s_raw_0; s_unified_1; s_raw_1; ...]`.
    pub fused: Vec<f64>,
}

impl SlideRepresentation {
    /// Concatenated unified parts only.
    pub fn unified(&self) -> Vec<f64> {
        self.per_model.iter().flat_map(|v| v.s_unified.iter().copied()).collect()
    }
}

/// Concatenates per-model views in canonical model order. Exactly one view for
/// each of the `n_models` configured models is required.
pub fn fuse(mut views: Vec<SlideViewEmbedding>, n_models: usize) -> Result<SlideRepresentation> {
    views.sort_by_key(|v| v.model);
    if views.len() != n_models || views.iter().enumerate().any(|(i, v)| v.model != i) {
        let got: Vec<usize> = views.iter().map(|v| v.model).collect();
        bail!(
            Contract,
            "fuse needs one view for each of {} models, got models {:?}",
            n_models,
            got
        );
    }
    let fused = views
        .iter()
        .flat_map(|v| v.s_unified.iter().chain(&v.s_raw).copied())
        .collect();
    Ok(SlideRepresentation {
        per_model: views,
        fused,
    })
}

/// Length of the fused vector for the given per-model input widths.
pub fn fused_len(unified_dim: usize, model_dims: &[usize]) -> usize {
    model_dims.iter().map(|d| unified_dim + d).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

/// Column-wise mean or max of the raw patch embeddings.
pub fn baseline_pool(bag: &PatchBag, mode: PoolMode) -> Result<Vec<f64>> {
    let (n, d) = bag.embeddings.dims2()?;
    if n == 0 {
        bail!(Contract, "empty patch bag");
    }
    let mut out = match mode {
        PoolMode::Mean => vec![0.0; d],
        PoolMode::Max => vec![f64::NEG_INFINITY; d],
    };
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(bag.embeddings.row(r)) {
            match mode {
                PoolMode::Mean => *o += v,
                PoolMode::Max => *o = o.max(v),
            }
        }
    }
    if mode == PoolMode::Mean {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    Ok(out)
}
