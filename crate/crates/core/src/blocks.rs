//! Transformer building blocks: configurable LN placement, multi-head
//! attention over `[n, d_model]` sequences, learned per-layer channel scales,
//! the cross-view feature block, and the cost-volume transformer regularizer.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    linear_attention, linear_attention_plain, vanilla_attention, vanilla_attention_plain,
    AttentionConfig, AttentionKind, AttentionScaling,
};
use crate::encodings::{fpe_3d, fpe_3d_plain};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthHypotheses};
use crate::ops::{
    add, add_bias, add_bias_plain, concat_cols, concat_cols_plain, gelu, gelu_plain, layer_norm,
    layer_norm_plain, matmul, matmul_plain, mul_channel, mul_channel_plain, patchify3d,
    patchify3d_plain, reshape, slice_cols, slice_cols_plain, transpose2d, transpose2d_plain,
    unpatchify3d, unpatchify3d_plain, COST_PATCH, LAYER_NORM_EPS,
};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};

/// Where layer normalization sits relative to the residual branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnPlacement {
    /// `x = x + Attn(LN(x))`, then `x = x + FFN(LN(x))`.
    Pre,
    /// `x = LN(x + Attn(x))`, then `x = LN(x + FFN(x))`.
    Post,
}

/// Configuration of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub expansion: usize,
    pub placement: LnPlacement,
    pub attention: AttentionConfig,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.expansion == 0 {
            return Err(Error::config("block config: expansion must be >= 1"));
        }
        if self.d_model != self.attention.d_model {
            return Err(Error::config(format!(
                "block config: d_model {} disagrees with attention d_model {}",
                self.d_model, self.attention.d_model
            )));
        }
        Ok(())
    }
}

/// One affine map `x·W + b` with `W: [d_in, d_out]`, `b: [d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add_uniform_init(format!("{prefix}.w"), &[d_in, d_out], d_in, rng)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]), true)?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = matmul(tape, x, w, false, false)?;
        add_bias(tape, y, b)
    }

    pub fn forward_plain<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = matmul_plain(x, store.value(self.w), false, false)?;
        add_bias_plain(&y, store.value(self.b))
    }
}

/// Learned layer-norm affine (`gamma` init 1, `beta` init 0).
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.g"), Tensor::full(&[d], T::one()), true)?;
        let beta = store.add(format!("{prefix}.b"), Tensor::zeros(&[d]), true)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        layer_norm(tape, x, g, b, LAYER_NORM_EPS)
    }

    pub fn forward_plain<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm_plain(x, store.value(self.gamma), store.value(self.beta), LAYER_NORM_EPS)
    }
}

/// All parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlockParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
}

impl TransformerBlockParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hidden = d * cfg.expansion;
        Ok(Self {
            wq: LinearParams::new(store, &format!("{prefix}.attn.q"), d, d, rng)?,
            wk: LinearParams::new(store, &format!("{prefix}.attn.k"), d, d, rng)?,
            wv: LinearParams::new(store, &format!("{prefix}.attn.v"), d, d, rng)?,
            wo: LinearParams::new(store, &format!("{prefix}.attn.out"), d, d, rng)?,
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), d)?,
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), d)?,
            ffn_in: LinearParams::new(store, &format!("{prefix}.ffn.in"), d, hidden, rng)?,
            ffn_out: LinearParams::new(store, &format!("{prefix}.ffn.out"), hidden, d, rng)?,
        })
    }

    /// Every parameter id in the block (useful for bulk edits in tests and
    /// for optimizer bookkeeping assertions).
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wq.w, self.wq.b, self.wk.w, self.wk.b, self.wv.w, self.wv.b, self.wo.w, self.wo.b,
            self.ln1.gamma, self.ln1.beta, self.ln2.gamma, self.ln2.beta,
            self.ffn_in.w, self.ffn_in.b, self.ffn_out.w, self.ffn_out.b,
        ]
    }
}

fn check_sequence<T: Real>(x: &Tensor<T>, d_model: usize, what: &str) -> Result<usize> {
    if x.rank() != 2 || x.shape()[1] != d_model {
        return Err(Error::shape(
            "transformer_block",
            format!("{what} must be [n, {d_model}], got {:?}", x.shape()),
        ));
    }
    Ok(x.shape()[0])
}

/// Multi-head attention over projected `[n, d_model]` sequences.
fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let d_h = cfg.head_dim();
    let n_k = tape.value(k).shape()[0];
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = slice_cols(tape, q, h * d_h, d_h)?;
        let kh = slice_cols(tape, k, h * d_h, d_h)?;
        let vh = slice_cols(tape, v, h * d_h, d_h)?;
        let out = match cfg.kind {
            AttentionKind::Vanilla => {
                let lambda = cfg.scaling.resolve(n_k, d_h)?;
                vanilla_attention(tape, qh, kh, vh, lambda)?
            }
            AttentionKind::Linear => linear_attention(tape, qh, kh, vh)?,
        };
        heads.push(out);
    }
    concat_cols(tape, &heads)
}

fn multi_head_plain<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let d_h = cfg.head_dim();
    let n_k = k.shape()[0];
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = slice_cols_plain(q, h * d_h, d_h)?;
        let kh = slice_cols_plain(k, h * d_h, d_h)?;
        let vh = slice_cols_plain(v, h * d_h, d_h)?;
        let out = match cfg.kind {
            AttentionKind::Vanilla => {
                let lambda = cfg.scaling.resolve(n_k, d_h)?;
                vanilla_attention_plain(&qh, &kh, &vh, lambda)?
            }
            AttentionKind::Linear => linear_attention_plain(&qh, &kh, &vh)?,
        };
        heads.push(out);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    concat_cols_plain(&refs)
}

/// One transformer block over `x: [n, d_model]`.
///
/// Self-attention when `kv` is absent; cross-attention (queries from `x`,
/// keys/values from `kv`) when present. Under Pre-LN the block's first LN is
/// shared between the query and key/value inputs of a cross block.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &TransformerBlockParams,
    cfg: &BlockConfig,
    x: NodeId,
    kv: Option<NodeId>,
) -> Result<NodeId> {
    cfg.validate()?;
    check_sequence(tape.value(x), cfg.d_model, "input")?;
    if let Some(kv) = kv {
        check_sequence(tape.value(kv), cfg.d_model, "kv input")?;
    }

    let attn_into = |tape: &mut Tape<T>, xq: NodeId, xkv: NodeId| -> Result<NodeId> {
        let q = params.wq.forward(tape, store, xq)?;
        let k = params.wk.forward(tape, store, xkv)?;
        let v = params.wv.forward(tape, store, xkv)?;
        let cat = multi_head(tape, q, k, v, &cfg.attention)?;
        params.wo.forward(tape, store, cat)
    };
    let ffn_into = |tape: &mut Tape<T>, y: NodeId| -> Result<NodeId> {
        let h = params.ffn_in.forward(tape, store, y)?;
        let h = gelu(tape, h)?;
        params.ffn_out.forward(tape, store, h)
    };

    match cfg.placement {
        LnPlacement::Pre => {
            let xq = params.ln1.forward(tape, store, x)?;
            let xkv = match kv {
                Some(kv) => params.ln1.forward(tape, store, kv)?,
                None => xq,
            };
            let attn = attn_into(tape, xq, xkv)?;
            let h = add(tape, x, attn)?;
            let hn = params.ln2.forward(tape, store, h)?;
            let f = ffn_into(tape, hn)?;
            add(tape, h, f)
        }
        LnPlacement::Post => {
            let xkv = kv.unwrap_or(x);
            let attn = attn_into(tape, x, xkv)?;
            let s = add(tape, x, attn)?;
            let h = params.ln1.forward(tape, store, s)?;
            let f = ffn_into(tape, h)?;
            let s2 = add(tape, h, f)?;
            params.ln2.forward(tape, store, s2)
        }
    }
}

/// Non-recording forward of [`transformer_block`]; identical arithmetic.
pub fn transformer_block_plain<T: Real>(
    store: &ParamStore<T>,
    params: &TransformerBlockParams,
    cfg: &BlockConfig,
    x: &Tensor<T>,
    kv: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_sequence(x, cfg.d_model, "input")?;
    if let Some(kv) = kv {
        check_sequence(kv, cfg.d_model, "kv input")?;
    }

    let attn_into = |xq: &Tensor<T>, xkv: &Tensor<T>| -> Result<Tensor<T>> {
        let q = params.wq.forward_plain(store, xq)?;
        let k = params.wk.forward_plain(store, xkv)?;
        let v = params.wv.forward_plain(store, xkv)?;
        let cat = multi_head_plain(&q, &k, &v, &cfg.attention)?;
        params.wo.forward_plain(store, &cat)
    };
    let ffn_into = |y: &Tensor<T>| -> Result<Tensor<T>> {
        let h = params.ffn_in.forward_plain(store, y)?;
        let h = gelu_plain(&h);
        params.ffn_out.forward_plain(store, &h)
    };

    match cfg.placement {
        LnPlacement::Pre => {
            let xq = params.ln1.forward_plain(store, x)?;
            let attn = match kv {
                Some(kv) => {
                    let xkv = params.ln1.forward_plain(store, kv)?;
                    attn_into(&xq, &xkv)?
                }
                None => attn_into(&xq, &xq)?,
            };
            let h = x.zip_map(&attn, "add", |a, b| a + b)?;
            let hn = params.ln2.forward_plain(store, &h)?;
            let f = ffn_into(&hn)?;
            h.zip_map(&f, "add", |a, b| a + b)
        }
        LnPlacement::Post => {
            let attn = attn_into(x, kv.unwrap_or(x))?;
            let s = x.zip_map(&attn, "add", |a, b| a + b)?;
            let h = params.ln1.forward_plain(store, &s)?;
            let f = ffn_into(&h)?;
            let s2 = h.zip_map(&f, "add", |a, b| a + b)?;
            params.ln2.forward_plain(store, &s2)
        }
    }
}

/// Per-backbone-layer channel gates, every coefficient initialized to 0.5.
#[derive(Debug, Clone)]
pub struct AlsCoeffs {
    pub scales: Vec<ParamId>,
    pub d_model: usize,
}

/// Initial value of every adaptive layer-scale coefficient.
pub const ALS_INIT: f64 = 0.5;

impl AlsCoeffs {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        layers: usize,
        d_model: usize,
    ) -> Result<Self> {
        if layers == 0 || d_model == 0 {
            return Err(Error::config("layer scales need >= 1 layer and a positive width"));
        }
        let mut scales = Vec::with_capacity(layers);
        for l in 0..layers {
            scales.push(store.add(
                format!("{prefix}.scale{l}"),
                Tensor::full(&[d_model], T::of(ALS_INIT)),
                true,
            )?);
        }
        Ok(Self { scales, d_model })
    }

    pub fn layer_count(&self) -> usize {
        self.scales.len()
    }
}

/// Gates an already-normalized feature map by the layer-`l` channel scales.
pub fn als_apply<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feat: NodeId,
    coeffs: &AlsCoeffs,
    layer: usize,
) -> Result<NodeId> {
    let id = *coeffs.scales.get(layer).ok_or_else(|| {
        Error::invalid(
            "als_apply",
            format!("layer {layer} out of range 0..{}", coeffs.scales.len()),
        )
    })?;
    let s = tape.param(store, id);
    mul_channel(tape, feat, s)
}

/// Non-recording forward of [`als_apply`].
pub fn als_apply_plain<T: Real>(
    store: &ParamStore<T>,
    feat: &Tensor<T>,
    coeffs: &AlsCoeffs,
    layer: usize,
) -> Result<Tensor<T>> {
    let id = *coeffs.scales.get(layer).ok_or_else(|| {
        Error::invalid(
            "als_apply",
            format!("layer {layer} out of range 0..{}", coeffs.scales.len()),
        )
    })?;
    mul_channel_plain(feat, store.value(id))
}

/// Parameters of one cross-view block level: a self-attention block for the
/// reference stream and a cross-attention block shared by all source streams.
#[derive(Debug, Clone)]
pub struct SvaBlockParams {
    pub self_block: TransformerBlockParams,
    pub cross_block: TransformerBlockParams,
}

impl SvaBlockParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_block: TransformerBlockParams::new(store, &format!("{prefix}.self"), cfg, rng)?,
            cross_block: TransformerBlockParams::new(store, &format!("{prefix}.cross"), cfg, rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.self_block.param_ids();
        ids.extend(self.cross_block.param_ids());
        ids
    }
}

/// Frozen-backbone features injected after a cross-view block level: each
/// stream's output receives `LN(tap)·S^layer`. Features arrive as plain
/// tensors and are bound as tape constants, so no gradient can reach their
/// producer; the LN affine and the channel scales do receive gradients.
pub struct SvaTap<'a, T: Real> {
    pub ref_feat: &'a Tensor<T>,
    pub src_feats: &'a [Tensor<T>],
    pub layer: usize,
    pub ln: &'a LayerNormParams,
    pub als: &'a AlsCoeffs,
}

/// One cross-view level: the reference stream runs the self-attention block;
/// every source stream runs the cross-attention block with keys/values taken
/// from the incoming reference stream. An optional frozen-feature tap is then
/// added to every stream's output.
pub fn sva_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &SvaBlockParams,
    cfg: &BlockConfig,
    ref_x: NodeId,
    srcs: &[NodeId],
    tap: Option<&SvaTap<'_, T>>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if srcs.is_empty() {
        return Err(Error::invalid("sva_block", "need at least one source view"));
    }
    if let Some(tap) = tap {
        if tap.src_feats.len() != srcs.len() {
            return Err(Error::shape(
                "sva_block",
                format!("{} tap features for {} source streams", tap.src_feats.len(), srcs.len()),
            ));
        }
    }
    let mut ref_out = transformer_block(tape, store, &params.self_block, cfg, ref_x, None)?;
    let mut src_outs = Vec::with_capacity(srcs.len());
    for &src in srcs {
        src_outs.push(transformer_block(tape, store, &params.cross_block, cfg, src, Some(ref_x))?);
    }
    if let Some(tap) = tap {
        let inject = |tape: &mut Tape<T>, stream: NodeId, feat: &Tensor<T>| -> Result<NodeId> {
            let feat = tape.constant(feat.clone());
            let normed = tap.ln.forward(tape, store, feat)?;
            let gated = als_apply(tape, store, normed, tap.als, tap.layer)?;
            add(tape, stream, gated)
        };
        ref_out = inject(tape, ref_out, tap.ref_feat)?;
        for (out, feat) in src_outs.iter_mut().zip(tap.src_feats.iter()) {
            *out = inject(tape, *out, feat)?;
        }
    }
    Ok((ref_out, src_outs))
}

/// Non-recording forward of [`sva_block`]; identical arithmetic.
pub fn sva_block_plain<T: Real>(
    store: &ParamStore<T>,
    params: &SvaBlockParams,
    cfg: &BlockConfig,
    ref_x: &Tensor<T>,
    srcs: &[Tensor<T>],
    tap: Option<&SvaTap<'_, T>>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if srcs.is_empty() {
        return Err(Error::invalid("sva_block", "need at least one source view"));
    }
    if let Some(tap) = tap {
        if tap.src_feats.len() != srcs.len() {
            return Err(Error::shape(
                "sva_block",
                format!("{} tap features for {} source streams", tap.src_feats.len(), srcs.len()),
            ));
        }
    }
    let mut ref_out = transformer_block_plain(store, &params.self_block, cfg, ref_x, None)?;
    let mut src_outs = Vec::with_capacity(srcs.len());
    for src in srcs {
        src_outs.push(transformer_block_plain(store, &params.cross_block, cfg, src, Some(ref_x))?);
    }
    if let Some(tap) = tap {
        let inject = |stream: &Tensor<T>, feat: &Tensor<T>| -> Result<Tensor<T>> {
            let normed = tap.ln.forward_plain(store, feat)?;
            let gated = als_apply_plain(store, &normed, tap.als, tap.layer)?;
            stream.zip_map(&gated, "add", |a, b| a + b)
        };
        ref_out = inject(&ref_out, tap.ref_feat)?;
        for (out, feat) in src_outs.iter_mut().zip(tap.src_feats.iter()) {
            *out = inject(out, feat)?;
        }
    }
    Ok((ref_out, src_outs))
}

/// Token width of the cost-volume transformer.
pub const CVT_CHANNELS: usize = 64;
/// Transformer depth of the cost-volume regularizer.
pub const CVT_BLOCKS: usize = 6;
/// Head count of the cost-volume regularizer (head dim 8).
pub const CVT_HEADS: usize = 8;

/// Token count after patchifying a `[G, D, H, W]` volume with the fixed
/// `(2, 4, 4)` patch: `(D/2)·(H/4)·(W/4)`.
pub fn cvt_sequence_len(d: usize, h: usize, w: usize) -> Result<usize> {
    let (pd, ph, pw) = COST_PATCH;
    if d == 0 || h == 0 || w == 0 || d % pd != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::invalid(
            "cvt_sequence_len",
            format!("volume {d}x{h}x{w} not divisible by patch {pd}x{ph}x{pw}"),
        ));
    }
    Ok((d / pd) * (h / ph) * (w / pw))
}

/// Parameters of the cost-volume transformer regularizer: patch embedding,
/// frustum positional-encoding projection, six Post-LN blocks with softmax
/// attention, and the transposed patch expansion back to per-depth logits.
#[derive(Debug, Clone)]
pub struct CostVolumeTransformerParams {
    pub patch: LinearParams,
    pub pe: LinearParams,
    pub blocks: Vec<TransformerBlockParams>,
    pub out: LinearParams,
    pub groups: usize,
    pub cfg: BlockConfig,
    /// When false the frustum positional encoding is skipped entirely
    /// (ablation switch); the projection parameters still exist but stay
    /// unused.
    pub use_fpe: bool,
}

impl CostVolumeTransformerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        groups: usize,
        scaling: AttentionScaling,
        use_fpe: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(Error::config("cost-volume transformer: groups must be positive"));
        }
        let c = CVT_CHANNELS;
        let cfg = BlockConfig {
            d_model: c,
            expansion: 4,
            placement: LnPlacement::Post,
            attention: AttentionConfig {
                d_model: c,
                heads: CVT_HEADS,
                kind: AttentionKind::Vanilla,
                scaling,
            },
        };
        cfg.validate()?;
        let (pd, ph, pw) = COST_PATCH;
        let patch_block = groups * pd * ph * pw;
        // Patch embedding acts as [c, patch_block]; the affine container is
        // only reused for parameter bookkeeping, forward goes through the
        // dedicated patch kernels.
        let patch = LinearParams {
            w: store.add_uniform_init(format!("{prefix}.patch.w"), &[c, patch_block], patch_block, rng)?,
            b: store.add(format!("{prefix}.patch.b"), Tensor::zeros(&[c]), true)?,
        };
        let pe = LinearParams {
            w: store.add_uniform_init(format!("{prefix}.pe.w"), &[c, 3 * c], 3 * c, rng)?,
            b: store.add(format!("{prefix}.pe.b"), Tensor::zeros(&[c]), true)?,
        };
        let mut blocks = Vec::with_capacity(CVT_BLOCKS);
        for i in 0..CVT_BLOCKS {
            blocks.push(TransformerBlockParams::new(store, &format!("{prefix}.block{i}"), &cfg, rng)?);
        }
        let out = LinearParams {
            w: store.add_uniform_init(format!("{prefix}.out.w"), &[c, pd * ph * pw], c, rng)?,
            b: store.add(format!("{prefix}.out.b"), Tensor::zeros(&[1]), true)?,
        };
        Ok(Self { patch, pe, blocks, out, groups, cfg, use_fpe })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch.w, self.patch.b, self.pe.w, self.pe.b];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.push(self.out.w);
        ids.push(self.out.b);
        ids
    }
}

/// Per-forward instrumentation of the cost-volume transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvtDiagnostics {
    /// Token count seen by every attention layer.
    pub sequence_len: usize,
    /// Softmax scale used by every attention layer.
    pub lambda: f64,
}

fn cvt_check<T: Real>(
    params: &CostVolumeTransformerParams,
    cost: &Tensor<T>,
    hyps: &DepthHypotheses,
) -> Result<(usize, usize, usize)> {
    if hyps.stage != 0 {
        return Err(Error::invalid(
            "cvt_regularize",
            format!("transformer regularizer only runs in the coarsest stage, got stage {}", hyps.stage),
        ));
    }
    if cost.rank() != 4 || cost.shape()[0] != params.groups {
        return Err(Error::shape(
            "cvt_regularize",
            format!("cost volume must be [{}, D, H, W], got {:?}", params.groups, cost.shape()),
        ));
    }
    let (d, h, w) = (cost.shape()[1], cost.shape()[2], cost.shape()[3]);
    if hyps.values.len() != d {
        return Err(Error::shape(
            "cvt_regularize",
            format!("{} hypotheses for depth extent {d}", hyps.values.len()),
        ));
    }
    Ok((d, h, w))
}

/// Inverse-depth midpoints of consecutive hypothesis pairs: the depth-axis
/// cell centers of the patch grid (z is affine in inverse depth, so these map
/// to the midpoint of the two plane coordinates).
fn patch_cell_depths(hyps: &DepthHypotheses) -> Vec<f64> {
    hyps.values
        .chunks_exact(2)
        .map(|pair| 2.0 / (1.0 / pair[0] + 1.0 / pair[1]))
        .collect()
}

/// Cost-volume transformer regularizer (coarsest stage only).
///
/// Patchifies `[G, D, H, W]` scores into `[64, D/2, H/4, W/4]` tokens, adds
/// the frustum positional encoding once, runs six Post-LN softmax-attention
/// blocks over the flattened token sequence, and expands back to `[D, H, W]`
/// per-hypothesis logits.
pub fn cvt_regularize<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &CostVolumeTransformerParams,
    cost: NodeId,
    cam_ref: &Camera,
    hyps: &DepthHypotheses,
) -> Result<(NodeId, CvtDiagnostics)> {
    let (d, h, w) = cvt_check(params, tape.value(cost), hyps)?;
    let cells = cvt_sequence_len(d, h, w)?;
    let c = CVT_CHANNELS;
    let (_, ph, pw) = COST_PATCH;

    let pw_node = tape.param(store, params.patch.w);
    let pb_node = tape.param(store, params.patch.b);
    let tok = patchify3d(tape, cost, pw_node, pb_node, COST_PATCH)?;

    let tok_flat = reshape(tape, tok, &[c, cells])?;
    let summed = if params.use_fpe {
        let few = tape.param(store, params.pe.w);
        let feb = tape.param(store, params.pe.b);
        let depths = patch_cell_depths(hyps);
        let pe = fpe_3d(tape, cam_ref, &depths, h / ph, w / pw, few, feb)?;
        add(tape, tok_flat, pe)?
    } else {
        tok_flat
    };
    let mut seq = transpose2d(tape, summed)?;
    for block in &params.blocks {
        seq = transformer_block(tape, store, block, &params.cfg, seq, None)?;
    }
    let back = transpose2d(tape, seq)?;
    let vol = reshape(tape, back, &[c, d / COST_PATCH.0, h / ph, w / pw])?;
    let ow = tape.param(store, params.out.w);
    let ob = tape.param(store, params.out.b);
    let out4 = unpatchify3d(tape, vol, ow, ob, COST_PATCH)?;
    let logits = reshape(tape, out4, &[d, h, w])?;

    let lambda = params.cfg.attention.scaling.resolve(cells, params.cfg.attention.head_dim())?;
    Ok((logits, CvtDiagnostics { sequence_len: cells, lambda }))
}

/// Non-recording forward of [`cvt_regularize`]; identical arithmetic, with
/// attention streamed so the score matrix is never materialized.
pub fn cvt_regularize_plain<T: Real>(
    store: &ParamStore<T>,
    params: &CostVolumeTransformerParams,
    cost: &Tensor<T>,
    cam_ref: &Camera,
    hyps: &DepthHypotheses,
) -> Result<(Tensor<T>, CvtDiagnostics)> {
    let (d, h, w) = cvt_check(params, cost, hyps)?;
    let cells = cvt_sequence_len(d, h, w)?;
    let c = CVT_CHANNELS;
    let (_, ph, pw) = COST_PATCH;

    let tok = patchify3d_plain(cost, store.value(params.patch.w), store.value(params.patch.b), COST_PATCH)?;
    let tok_flat = tok.reshaped(&[c, cells])?;
    let summed = if params.use_fpe {
        let depths = patch_cell_depths(hyps);
        let pe = fpe_3d_plain(cam_ref, &depths, h / ph, w / pw, store.value(params.pe.w), store.value(params.pe.b))?;
        tok_flat.zip_map(&pe, "add", |a, b| a + b)?
    } else {
        tok_flat
    };
    let mut seq = transpose2d_plain(&summed)?;
    for block in &params.blocks {
        seq = transformer_block_plain(store, block, &params.cfg, &seq, None)?;
    }
    let back = transpose2d_plain(&seq)?;
    let vol = back.reshaped(&[c, d / COST_PATCH.0, h / ph, w / pw])?;
    let out4 = unpatchify3d_plain(&vol, store.value(params.out.w), store.value(params.out.b), COST_PATCH)?;
    let logits = out4.reshaped(&[d, h, w])?;

    let lambda = params.cfg.attention.scaling.resolve(cells, params.cfg.attention.head_dim())?;
    Ok((logits, CvtDiagnostics { sequence_len: cells, lambda }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::aas_scale;
    use crate::geometry::inverse_depth_hypotheses;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::ops;
    use crate::tensor::seeded_rng;

    fn small_cfg(kind: AttentionKind, placement: LnPlacement) -> BlockConfig {
        BlockConfig {
            d_model: 8,
            expansion: 2,
            placement,
            attention: AttentionConfig {
                d_model: 8,
                heads: 2,
                kind,
                scaling: AttentionScaling::Default,
            },
        }
    }

    fn zero_params(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    /// Everything except the two layer norms.
    fn sublayer_ids(p: &TransformerBlockParams) -> Vec<ParamId> {
        vec![
            p.wq.w, p.wq.b, p.wk.w, p.wk.b, p.wv.w, p.wv.b, p.wo.w, p.wo.b,
            p.ffn_in.w, p.ffn_in.b, p.ffn_out.w, p.ffn_out.b,
        ]
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = small_cfg(AttentionKind::Vanilla, LnPlacement::Pre);
        cfg.attention.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(AttentionKind::Vanilla, LnPlacement::Pre);
        cfg.d_model = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(AttentionKind::Vanilla, LnPlacement::Pre);
        cfg.expansion = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_sublayers_pre_ln_is_identity() {
        for kind in [AttentionKind::Vanilla, AttentionKind::Linear] {
            let cfg = small_cfg(kind, LnPlacement::Pre);
            let mut rng = seeded_rng(500);
            let mut store = ParamStore::<f64>::new();
            let params = TransformerBlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
            zero_params(&mut store, &sublayer_ids(&params));
            let x = Tensor::<f64>::uniform(&[5, 8], -2.0, 2.0, &mut rng);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let out = transformer_block(&mut tape, &store, &params, &cfg, xn, None).unwrap();
            assert_eq!(tape.value(out), &x, "kind {kind:?}");
        }
    }

    #[test]
    fn zero_sublayers_post_ln_is_double_layer_norm() {
        let cfg = small_cfg(AttentionKind::Vanilla, LnPlacement::Post);
        let mut rng = seeded_rng(501);
        let mut store = ParamStore::<f64>::new();
        let params = TransformerBlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
        zero_params(&mut store, &sublayer_ids(&params));
        let x = Tensor::<f64>::uniform(&[4, 8], -2.0, 2.0, &mut rng);
        let out = transformer_block_plain(&store, &params, &cfg, &x, None).unwrap();
        let ones = Tensor::<f64>::full(&[8], 1.0);
        let zeros = Tensor::<f64>::zeros(&[8]);
        let ln1 = layer_norm_plain(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        let ln2 = layer_norm_plain(&ln1, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(out, ln2);
        assert!(out.max_abs_diff(&x).unwrap() > 1e-3, "post-LN must not be the identity");
    }

    #[test]
    fn self_block_gradients_match_finite_differences() {
        let cfg = small_cfg(AttentionKind::Vanilla, LnPlacement::Pre);
        let mut rng = seeded_rng(502);
        let mut store = ParamStore::<f64>::new();
        let params = TransformerBlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.constant(x.clone());
                let out = transformer_block(tape, store, &params, &cfg, xn, None)?;
                let weighted = ops::mul_const(tape, out, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            6,
            50,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_block_gradients_match_finite_differences() {
        let cfg = small_cfg(AttentionKind::Linear, LnPlacement::Post);
        let mut rng = seeded_rng(503);
        let mut store = ParamStore::<f64>::new();
        let params = TransformerBlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let kv = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.constant(x.clone());
                let kvn = tape.constant(kv.clone());
                let out = transformer_block(tape, store, &params, &cfg, xn, Some(kvn))?;
                let weighted = ops::mul_const(tape, out, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            6,
            51,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn block_tape_and_plain_paths_agree_bitwise() {
        for kind in [AttentionKind::Vanilla, AttentionKind::Linear] {
            for placement in [LnPlacement::Pre, LnPlacement::Post] {
                let cfg = small_cfg(kind, placement);
                let mut rng = seeded_rng(504);
                let mut store = ParamStore::<f32>::new();
                let params = TransformerBlockParams::new(&mut store, "blk", &cfg, &mut rng).unwrap();
                let x = Tensor::<f32>::uniform(&[9, 8], -1.0, 1.0, &mut rng);
                let kv = Tensor::<f32>::uniform(&[7, 8], -1.0, 1.0, &mut rng);
                for use_kv in [false, true] {
                    let mut tape = Tape::new();
                    let xn = tape.constant(x.clone());
                    let kvn = use_kv.then(|| tape.constant(kv.clone()));
                    let out = transformer_block(&mut tape, &store, &params, &cfg, xn, kvn).unwrap();
                    let plain =
                        transformer_block_plain(&store, &params, &cfg, &x, use_kv.then_some(&kv))
                            .unwrap();
                    assert_eq!(tape.value(out), &plain, "{kind:?} {placement:?} kv={use_kv}");
                }
            }
        }
    }

    #[test]
    fn channel_scale_gates() {
        let mut store = ParamStore::<f64>::new();
        let als = AlsCoeffs::new(&mut store, "als", 3, 4).unwrap();
        let x = Tensor::<f64>::full(&[2, 4], 1.0);

        // Init 0.5 on unit input.
        let half = als_apply_plain(&store, &x, &als, 1).unwrap();
        assert_eq!(half, Tensor::full(&[2, 4], 0.5));

        store.set_value(als.scales[0], Tensor::zeros(&[4])).unwrap();
        let gated_off = als_apply_plain(&store, &x, &als, 0).unwrap();
        assert_eq!(gated_off, Tensor::zeros(&[2, 4]));

        store.set_value(als.scales[2], Tensor::full(&[4], 1.0)).unwrap();
        let mut rng = seeded_rng(505);
        let y = Tensor::<f64>::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let identity = als_apply_plain(&store, &y, &als, 2).unwrap();
        assert_eq!(identity, y);

        assert!(als_apply_plain(&store, &x, &als, 3).is_err());
    }

    #[test]
    fn sva_symmetric_start_keeps_streams_equal() {
        let cfg = small_cfg(AttentionKind::Linear, LnPlacement::Pre);
        let mut rng = seeded_rng(506);
        let mut store = ParamStore::<f64>::new();
        let params = SvaBlockParams::new(&mut store, "sva", &cfg, &mut rng).unwrap();
        // Zero both blocks' output projections: each stream passes through.
        for p in [&params.self_block, &params.cross_block] {
            zero_params(&mut store, &[p.wo.w, p.wo.b, p.ffn_out.w, p.ffn_out.b]);
        }
        let x = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);
        let (ref_out, src_outs) =
            sva_block_plain(&store, &params, &cfg, &x, std::slice::from_ref(&x), None).unwrap();
        assert_eq!(ref_out, src_outs[0]);
        assert_eq!(ref_out, x);
    }

    #[test]
    fn sva_rejects_empty_views_and_tap_mismatch() {
        let cfg = small_cfg(AttentionKind::Linear, LnPlacement::Pre);
        let mut rng = seeded_rng(507);
        let mut store = ParamStore::<f64>::new();
        let params = SvaBlockParams::new(&mut store, "sva", &cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        assert!(sva_block_plain(&store, &params, &cfg, &x, &[], None).is_err());

        let ln = LayerNormParams::new(&mut store, "tap_ln", 8).unwrap();
        let als = AlsCoeffs::new(&mut store, "als", 2, 8).unwrap();
        let tap_feats: Vec<Tensor<f64>> = vec![x.clone(), x.clone()];
        let tap = SvaTap { ref_feat: &x, src_feats: &tap_feats, layer: 0, ln: &ln, als: &als };
        let srcs = vec![x.clone()];
        assert!(sva_block_plain(&store, &params, &cfg, &x, &srcs, Some(&tap)).is_err());
    }

    #[test]
    fn sva_tap_adds_normalized_gated_features_to_both_streams() {
        let cfg = small_cfg(AttentionKind::Linear, LnPlacement::Pre);
        let mut rng = seeded_rng(508);
        let mut store = ParamStore::<f64>::new();
        let params = SvaBlockParams::new(&mut store, "sva", &cfg, &mut rng).unwrap();
        for p in [&params.self_block, &params.cross_block] {
            zero_params(&mut store, &[p.wo.w, p.wo.b, p.ffn_out.w, p.ffn_out.b]);
        }
        let ln = LayerNormParams::new(&mut store, "tap_ln", 8).unwrap();
        let als = AlsCoeffs::new(&mut store, "als", 2, 8).unwrap();

        let ref_x = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let src_x = Tensor::<f64>::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let tap_ref = Tensor::<f64>::uniform(&[5, 8], -3.0, 3.0, &mut rng);
        let tap_src = Tensor::<f64>::uniform(&[5, 8], -3.0, 3.0, &mut rng);
        let tap_feats = vec![tap_src.clone()];
        let tap = SvaTap { ref_feat: &tap_ref, src_feats: &tap_feats, layer: 1, ln: &ln, als: &als };
        let srcs = vec![src_x.clone()];
        let (ref_out, src_outs) =
            sva_block_plain(&store, &params, &cfg, &ref_x, &srcs, Some(&tap)).unwrap();

        let expect = |stream: &Tensor<f64>, feat: &Tensor<f64>| {
            let normed = ln.forward_plain(&store, feat).unwrap();
            let gated = als_apply_plain(&store, &normed, &als, 1).unwrap();
            stream.zip_map(&gated, "add", |a, b| a + b).unwrap()
        };
        assert_eq!(ref_out, expect(&ref_x, &tap_ref));
        assert_eq!(src_outs[0], expect(&src_x, &tap_src));
    }

    #[test]
    fn sva_tape_matches_plain_and_gradients_check() {
        let cfg = small_cfg(AttentionKind::Linear, LnPlacement::Pre);
        let mut rng = seeded_rng(509);
        let mut store = ParamStore::<f64>::new();
        let params = SvaBlockParams::new(&mut store, "sva", &cfg, &mut rng).unwrap();
        let ln = LayerNormParams::new(&mut store, "tap_ln", 8).unwrap();
        let als = AlsCoeffs::new(&mut store, "als", 1, 8).unwrap();

        let ref_x = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let srcs = vec![
            Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng),
        ];
        let tap_ref = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let tap_feats = vec![
            Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng),
        ];

        // Equality of the two forward paths.
        let tap = SvaTap { ref_feat: &tap_ref, src_feats: &tap_feats, layer: 0, ln: &ln, als: &als };
        let (ref_plain, src_plain) =
            sva_block_plain(&store, &params, &cfg, &ref_x, &srcs, Some(&tap)).unwrap();
        let mut tape = Tape::new();
        let ref_node = tape.constant(ref_x.clone());
        let src_nodes: Vec<NodeId> = srcs.iter().map(|s| tape.constant(s.clone())).collect();
        let (ref_out, src_outs) =
            sva_block(&mut tape, &store, &params, &cfg, ref_node, &src_nodes, Some(&tap)).unwrap();
        assert_eq!(tape.value(ref_out), &ref_plain);
        for (node, plain) in src_outs.iter().zip(src_plain.iter()) {
            assert_eq!(tape.value(*node), plain);
        }

        // Gradient check through both streams, tap parameters included.
        let probe_ref = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let probe_src = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let tap = SvaTap {
                    ref_feat: &tap_ref,
                    src_feats: &tap_feats,
                    layer: 0,
                    ln: &ln,
                    als: &als,
                };
                let ref_node = tape.constant(ref_x.clone());
                let src_nodes: Vec<NodeId> =
                    srcs.iter().map(|s| tape.constant(s.clone())).collect();
                let (ref_out, src_outs) =
                    sva_block(tape, store, &params, &cfg, ref_node, &src_nodes, Some(&tap))?;
                let a = ops::mul_const(tape, ref_out, &probe_ref)?;
                let b = ops::mul_const(tape, src_outs[1], &probe_src)?;
                let sa = ops::sum_all(tape, a)?;
                let sb = ops::sum_all(tape, b)?;
                ops::add(tape, sa, sb)
            },
            DEFAULT_STEP,
            4,
            52,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    fn test_camera() -> Camera {
        let k = [[100.0, 0.0, 16.0], [0.0, 100.0, 12.0], [0.0, 0.0, 1.0]];
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Camera::new(k, r, [0.0, 0.0, 0.0], 400.0, 1000.0).unwrap()
    }

    #[test]
    fn cvt_sequence_len_closed_form() {
        assert_eq!(cvt_sequence_len(16, 32, 32).unwrap(), 512);
        // 64x96 images at 1/8 scale with 16 hypotheses.
        assert_eq!(cvt_sequence_len(16, 8, 12).unwrap(), 48);
        // Full-scale 1152x1536 at 1/8 with 32 hypotheses: 16*36*48.
        assert_eq!(cvt_sequence_len(32, 144, 192).unwrap(), 27648);
        assert!(cvt_sequence_len(15, 32, 32).is_err());
        assert!(cvt_sequence_len(16, 30, 32).is_err());
    }

    #[test]
    fn cvt_shapes_and_diagnostics() {
        let mut rng = seeded_rng(510);
        let mut store = ParamStore::<f32>::new();
        let params = CostVolumeTransformerParams::new(
            &mut store,
            "cvt",
            8,
            AttentionScaling::Adaptive { n_bar: 512 },
            true,
            &mut rng,
        )
        .unwrap();
        let cam = test_camera();
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, 16, 0, None, None).unwrap();
        let cost = Tensor::<f32>::uniform(&[8, 16, 32, 32], -1.0, 1.0, &mut rng);
        let (logits, diag) = cvt_regularize_plain(&store, &params, &cost, &cam, &hyps).unwrap();
        assert_eq!(logits.shape(), &[16, 32, 32]);
        assert_eq!(diag.sequence_len, 512);
        assert!((diag.lambda - aas_scale(512, 8, 512).unwrap()).abs() < 1e-15);
        logits.ensure_finite("logits").unwrap();
    }

    #[test]
    fn cvt_rejects_later_stages() {
        let mut rng = seeded_rng(511);
        let mut store = ParamStore::<f32>::new();
        let params = CostVolumeTransformerParams::new(
            &mut store,
            "cvt",
            4,
            AttentionScaling::Default,
            true,
            &mut rng,
        )
        .unwrap();
        let cam = test_camera();
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, 8, 1, Some(600.0), Some(0.125)).unwrap();
        let cost = Tensor::<f32>::uniform(&[4, 8, 8, 8], -1.0, 1.0, &mut rng);
        let err = cvt_regularize_plain(&store, &params, &cost, &cam, &hyps);
        assert!(err.is_err());
    }

    #[test]
    fn cvt_lambda_tracks_resolution_only_under_adaptive_scaling() {
        let mut rng = seeded_rng(512);
        let mut store = ParamStore::<f32>::new();
        let adaptive = CostVolumeTransformerParams::new(
            &mut store,
            "cvt_aas",
            4,
            AttentionScaling::Adaptive { n_bar: 64 },
            true,
            &mut rng,
        )
        .unwrap();
        let fixed = CostVolumeTransformerParams::new(
            &mut store,
            "cvt_def",
            4,
            AttentionScaling::Default,
            true,
            &mut rng,
        )
        .unwrap();
        let cam = test_camera();
        let mut diags = Vec::new();
        for (d, h, w) in [(8usize, 16usize, 16usize), (8, 32, 32)] {
            let hyps = inverse_depth_hypotheses(400.0, 1000.0, d, 0, None, None).unwrap();
            let cost = Tensor::<f32>::uniform(&[4, d, h, w], -1.0, 1.0, &mut rng);
            let (_, da) = cvt_regularize_plain(&store, &adaptive, &cost, &cam, &hyps).unwrap();
            let (_, df) = cvt_regularize_plain(&store, &fixed, &cost, &cam, &hyps).unwrap();
            diags.push((da, df));
        }
        let n0 = diags[0].0.sequence_len;
        let n1 = diags[1].0.sequence_len;
        assert_eq!(n0, 64);
        assert_eq!(n1, 256);
        assert_eq!(diags[0].0.lambda, aas_scale(n0, 8, 64).unwrap());
        assert_eq!(diags[1].0.lambda, aas_scale(n1, 8, 64).unwrap());
        assert!(diags[1].0.lambda > diags[0].0.lambda);
        assert_eq!(diags[0].1.lambda, diags[1].1.lambda);
        assert_eq!(diags[0].1.lambda, 1.0 / (8.0f64).sqrt());
    }

    #[test]
    fn cvt_tape_matches_plain_bitwise() {
        let mut rng = seeded_rng(513);
        let mut store = ParamStore::<f32>::new();
        let params = CostVolumeTransformerParams::new(
            &mut store,
            "cvt",
            2,
            AttentionScaling::Adaptive { n_bar: 512 },
            true,
            &mut rng,
        )
        .unwrap();
        let cam = test_camera();
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, 4, 0, None, None).unwrap();
        let cost = Tensor::<f32>::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng);
        let (plain, diag_plain) = cvt_regularize_plain(&store, &params, &cost, &cam, &hyps).unwrap();
        let mut tape = Tape::new();
        let cost_node = tape.constant(cost);
        let (node, diag_tape) =
            cvt_regularize(&mut tape, &store, &params, cost_node, &cam, &hyps).unwrap();
        assert_eq!(tape.value(node), &plain);
        assert_eq!(diag_plain, diag_tape);
    }

    #[test]
    fn cvt_positional_encoding_toggle_changes_output_only() {
        let mut rng = seeded_rng(517);
        let mut store = ParamStore::<f32>::new();
        let with_pe = CostVolumeTransformerParams::new(
            &mut store,
            "cvt",
            2,
            AttentionScaling::Default,
            true,
            &mut rng,
        )
        .unwrap();
        let without_pe = CostVolumeTransformerParams { use_fpe: false, ..with_pe.clone() };
        let cam = test_camera();
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, 4, 0, None, None).unwrap();
        let cost = Tensor::<f32>::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng);
        let (on, _) = cvt_regularize_plain(&store, &with_pe, &cost, &cam, &hyps).unwrap();
        let (off, _) = cvt_regularize_plain(&store, &without_pe, &cost, &cam, &hyps).unwrap();
        assert_eq!(on.shape(), off.shape());
        off.ensure_finite("logits without positional encoding").unwrap();
        let diff = on.max_abs_diff(&off).unwrap();
        assert!(diff > 0.0, "positional encoding should change the logits");
        // The toggled path stays bitwise consistent between tape and plain.
        let mut tape = Tape::new();
        let cost_node = tape.constant(cost);
        let (node, _) =
            cvt_regularize(&mut tape, &store, &without_pe, cost_node, &cam, &hyps).unwrap();
        assert_eq!(tape.value(node), &off);
    }

    #[test]
    fn cvt_gradients_match_finite_differences() {
        let mut rng = seeded_rng(514);
        let mut store = ParamStore::<f64>::new();
        let params = CostVolumeTransformerParams::new(
            &mut store,
            "cvt",
            2,
            AttentionScaling::Adaptive { n_bar: 8 },
            true,
            &mut rng,
        )
        .unwrap();
        let cam = test_camera();
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, 4, 0, None, None).unwrap();
        let cost = Tensor::<f64>::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let cost_node = tape.constant(cost.clone());
                let (logits, _) = cvt_regularize(tape, store, &params, cost_node, &cam, &hyps)?;
                let weighted = ops::mul_const(tape, logits, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            2,
            53,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
