//! Scaled dot-product attention, multi-head attention and the co-attention
//! block family.
//!
//! Every block is post-LN: `y1 = LN(q + MHA(q, kv, kv))`,
//! `y2 = LN(y1 + FFN(y1))`. A self-attention block is the case `q == kv`.
//! A guided block takes its queries from the guide stream and its keys and
//! values from the target stream, so its output has the guide's token count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::params::{xavier_uniform, he_normal, Bound, ParamId, ParamStore};
use crate::nn::{layer_norm, linear, LAYER_NORM_EPS};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Both directions: audio queries over visual tokens and visual queries
    /// over audio tokens.
    Cma,
    /// Audio-guided: audio queries attend to visual keys and values.
    Aga,
    /// Visual-guided: visual queries attend to audio keys and values.
    Vga,
}

impl Variant {
    pub fn cross_blocks(self) -> usize {
        match self {
            Variant::Cma => 2,
            Variant::Aga | Variant::Vga => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cma => "CMA",
            Variant::Aga => "AGA",
            Variant::Vga => "VGA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoAttentionConfig {
    /// Model width shared by both streams.
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
    pub variant: Variant,
    pub ffn_width: usize,
}

impl CoAttentionConfig {
    pub fn new(d: usize, heads: usize, depth: usize, variant: Variant) -> Self {
        CoAttentionConfig {
            d,
            heads,
            depth,
            variant,
            ffn_width: 2 * d,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::HeadMismatch {
                heads: self.heads,
                width: self.d,
            });
        }
        if self.depth == 0 || self.ffn_width == 0 {
            return Err(Error::ConfigMismatch(
                "depth and ffn_width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count of the whole stack.
    pub fn count_params(&self) -> usize {
        let (d, f) = (self.d, self.ffn_width);
        let mha = 3 * d * d + d * d;
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let block = mha + ffn + 2 * ln;
        self.depth * (self.variant.cross_blocks() + 2) * block
    }
}

/// `softmax(QKᵀ/√d_k)·V` over `[B, n, d]` operands. Returns the output and the
/// `[B, n_q, n_k]` attention weights.
pub fn scaled_dot_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3
        || ks.len() != 3
        || vs.len() != 3
        || qs[0] != ks[0]
        || ks[0] != vs[0]
        || qs[2] != ks[2]
        || ks[1] != vs[1]
    {
        return Err(shape_err!(
            "attention over Q {:?}, K {:?}, V {:?}",
            qs,
            ks,
            vs
        ));
    }
    if qs[2] == 0 || ks[1] == 0 {
        return Err(shape_err!("attention needs d_k >= 1 and n_k >= 1"));
    }
    let scale = 1.0 / (qs[2] as f64).sqrt();
    let weights = q
        .matmul(&k.transpose_last()?)?
        .scale(scale)
        .softmax_lastdim()?;
    Ok((weights.matmul(v)?, weights))
}

/// Fused projection weights: column block `i·d_m..(i+1)·d_m` of `wq`, `wk`
/// and `wv` is head `i`'s `d × d_m` matrix; `wo` is `(m·d_m) × d`.
#[derive(Clone, Copy)]
pub struct MhaWeights<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

/// `[B, n, m·d_m] → [B·m, n, d_m]`
fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, n, heads, d / heads])?
        .transpose(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, d / heads])
}

/// Multi-head attention. Returns the projected output `[B, n_q, d]` and the
/// per-head weights as `[B, m, n_q, n_k]`.
pub fn multi_head_attention<'t>(
    q_in: &Var<'t>,
    k_in: &Var<'t>,
    v_in: &Var<'t>,
    w: &MhaWeights<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let qs = q_in.shape();
    if qs.len() != 3 {
        return Err(shape_err!("multi-head attention expects [B, n, d], got {:?}", qs));
    }
    let (b, n_q, d) = (qs[0], qs[1], qs[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::HeadMismatch { heads, width: d });
    }
    let n_k = k_in.shape()[1];
    let q = split_heads(&linear(q_in, &w.wq, None)?, heads)?;
    let k = split_heads(&linear(k_in, &w.wk, None)?, heads)?;
    let v = split_heads(&linear(v_in, &w.wv, None)?, heads)?;
    let (ctx, weights) = scaled_dot_attention(&q, &k, &v)?;
    let merged = ctx
        .reshape(&[b, heads, n_q, d / heads])?
        .transpose(&[0, 2, 1, 3])?
        .reshape(&[b, n_q, d])?;
    let out = linear(&merged, &w.wo, None)?;
    Ok((out, weights.reshape(&[b, heads, n_q, n_k])?))
}

#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameters of one attention block (self or guided).
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub mha: MhaParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

impl MhaParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), xavier_uniform(&[d, d], d, d, rng), true);
        Ok(MhaParams {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
        })
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> MhaWeights<'t> {
        MhaWeights {
            wq: b.get(self.wq),
            wk: b.get(self.wk),
            wv: b.get(self.wv),
            wo: b.get(self.wo),
        }
    }
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d], 1.0), false)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d]), false)?,
        })
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, &b.get(self.gamma), &b.get(self.beta), LAYER_NORM_EPS)
    }
}

impl FfnParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FfnParams {
            w1: store.add(format!("{prefix}.w1"), he_normal(&[d, width], d, rng), true)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([width]), false)?,
            w2: store.add(
                format!("{prefix}.w2"),
                xavier_uniform(&[width, d], width, d, rng),
                true,
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d]), false)?,
        })
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = linear(x, &b.get(self.w1), Some(&b.get(self.b1)))?.relu();
        linear(&h, &b.get(self.w2), Some(&b.get(self.b2)))
    }
}

impl BlockParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &CoAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BlockParams {
            mha: MhaParams::register(store, &format!("{prefix}.mha"), cfg.d, rng)?,
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), cfg.d)?,
            ffn: FfnParams::register(store, &format!("{prefix}.ffn"), cfg.d, cfg.ffn_width, rng)?,
            ln2: LayerNormParams::register(store, &format!("{prefix}.ln2"), cfg.d)?,
        })
    }
}

/// One post-LN attention block with queries from `query` and keys/values
/// from `context`. Returns the block output and per-head weights.
pub fn attention_block<'t>(
    query: &Var<'t>,
    context: &Var<'t>,
    p: &BlockParams,
    b: &Bound<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, cs) = (query.shape(), context.shape());
    if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
        return Err(shape_err!("block inputs {:?} and {:?}", qs, cs));
    }
    let (attended, weights) = multi_head_attention(query, context, context, &p.mha.bind(b), heads)?;
    let y1 = p.ln1.apply(b, &query.add(&attended)?)?;
    let y2 = p.ln2.apply(b, &y1.add(&p.ffn.apply(b, &y1)?)?)?;
    Ok((y2, weights))
}

/// Self-attention block: `Q = K = V = x`.
pub fn sa_block<'t>(x: &Var<'t>, p: &BlockParams, b: &Bound<'t>, heads: usize) -> Result<(Var<'t>, Var<'t>)> {
    attention_block(x, x, p, b, heads)
}

/// Guided attention: queries from `guide`, keys and values from `target`,
/// residual on the guide. Visual-guided attention is
/// `guided_attention_block(audio, visual, ..)`; audio-guided is
/// `guided_attention_block(visual, audio, ..)`.
pub fn guided_attention_block<'t>(
    target: &Var<'t>,
    guide: &Var<'t>,
    p: &BlockParams,
    b: &Bound<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    attention_block(guide, target, p, b, heads)
}

/// Cross-modal attention: both directions from the same inputs with
/// independent weights. Returns `(audio', visual', audio-query weights,
/// visual-query weights)`.
pub fn cma_block<'t>(
    audio: &Var<'t>,
    visual: &Var<'t>,
    audio_dir: &BlockParams,
    visual_dir: &BlockParams,
    b: &Bound<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
    let (a, wa) = attention_block(audio, visual, audio_dir, b, heads)?;
    let (v, wv) = attention_block(visual, audio, visual_dir, b, heads)?;
    Ok((a, v, wa, wv))
}

#[derive(Debug, Clone, Copy)]
pub enum CrossParams {
    Cma {
        audio_query: BlockParams,
        visual_query: BlockParams,
    },
    Aga(BlockParams),
    Vga(BlockParams),
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub cross: CrossParams,
    pub sa_audio: BlockParams,
    pub sa_visual: BlockParams,
}

#[derive(Debug, Clone)]
pub struct CoAttentionParams {
    pub layers: Vec<LayerParams>,
}

impl CoAttentionParams {
    /// Registers every stack parameter under `prefix`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &CoAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("{prefix}.layer{l}");
            let cross = match cfg.variant {
                Variant::Cma => CrossParams::Cma {
                    audio_query: BlockParams::register(store, &format!("{p}.cma_audio"), cfg, rng)?,
                    visual_query: BlockParams::register(store, &format!("{p}.cma_visual"), cfg, rng)?,
                },
                Variant::Aga => CrossParams::Aga(BlockParams::register(store, &format!("{p}.aga"), cfg, rng)?),
                Variant::Vga => CrossParams::Vga(BlockParams::register(store, &format!("{p}.vga"), cfg, rng)?),
            };
            layers.push(LayerParams {
                cross,
                sa_audio: BlockParams::register(store, &format!("{p}.sa_audio"), cfg, rng)?,
                sa_visual: BlockParams::register(store, &format!("{p}.sa_visual"), cfg, rng)?,
            });
        }
        Ok(CoAttentionParams { layers })
    }
}

/// Which attention inside a layer produced a weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Audio queries over visual keys (CMA audio direction or AGA).
    AudioQuery,
    /// Visual queries over audio keys (CMA visual direction or VGA).
    VisualQuery,
    SelfAudio,
    SelfVisual,
}

impl Stage {
    pub fn has_visual_keys(self) -> bool {
        matches!(self, Stage::AudioQuery | Stage::SelfVisual)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub stage: Stage,
    /// `[m, B, n_q, n_k]`
    pub weights: Tensor,
}

fn to_record(layer: usize, stage: Stage, w: &Var<'_>) -> Result<AttentionRecord> {
    let s = w.shape();
    let (data_shape, data) = crate::kernels::permute(&w.value(), &s, &[1, 0, 2, 3]);
    Ok(AttentionRecord {
        layer,
        stage,
        weights: Tensor::new(data_shape, data)?,
    })
}

/// Runs the cascaded stack. Each layer applies the variant's cross stage and
/// then one self-attention block per stream. With `record`, every attention
/// weight tensor is copied out in execution order.
pub fn co_attention_stack<'t>(
    audio: &Var<'t>,
    visual: &Var<'t>,
    cfg: &CoAttentionConfig,
    params: &CoAttentionParams,
    b: &Bound<'t>,
    record: bool,
) -> Result<(Var<'t>, Var<'t>, Vec<AttentionRecord>)> {
    cfg.validate()?;
    if params.layers.len() != cfg.depth {
        return Err(Error::ConfigMismatch(format!(
            "{} parameter layers for depth {}",
            params.layers.len(),
            cfg.depth
        )));
    }
    for (name, s) in [("audio", audio.shape()), ("visual", visual.shape())] {
        if s.len() != 3 || s[2] != cfg.d {
            return Err(Error::ConfigMismatch(format!(
                "{name} tokens {:?} do not have width {}",
                s, cfg.d
            )));
        }
    }
    let m = cfg.heads;
    let (mut a, mut v) = (*audio, *visual);
    let mut records = Vec::new();
    let mut keep = |layer, stage, w: &Var<'t>| -> Result<()> {
        if record {
            records.push(to_record(layer, stage, w)?);
        }
        Ok(())
    };
    for (l, lp) in params.layers.iter().enumerate() {
        match (&lp.cross, cfg.variant) {
            (CrossParams::Cma { audio_query, visual_query }, Variant::Cma) => {
                let (na, nv, wa, wv) = cma_block(&a, &v, audio_query, visual_query, b, m)?;
                keep(l, Stage::AudioQuery, &wa)?;
                keep(l, Stage::VisualQuery, &wv)?;
                (a, v) = (na, nv);
            }
            (CrossParams::Aga(p), Variant::Aga) => {
                let (na, w) = guided_attention_block(&v, &a, p, b, m)?;
                keep(l, Stage::AudioQuery, &w)?;
                a = na;
            }
            (CrossParams::Vga(p), Variant::Vga) => {
                let (nv, w) = guided_attention_block(&a, &v, p, b, m)?;
                keep(l, Stage::VisualQuery, &w)?;
                v = nv;
            }
            _ => {
                return Err(Error::ConfigMismatch(format!(
                    "layer {l} parameters do not match variant {}",
                    cfg.variant.name()
                )))
            }
        }
        let (na, wa) = sa_block(&a, &lp.sa_audio, b, m)?;
        keep(l, Stage::SelfAudio, &wa)?;
        let (nv, wv) = sa_block(&v, &lp.sa_visual, b, m)?;
        keep(l, Stage::SelfVisual, &wv)?;
        (a, v) = (na, nv);
    }
    Ok((a, v, records))
}
