//! Attention kernels: softmax attention with configurable logit scaling
//! (including the length-adaptive scale), kernelized linear attention, and
//! the row-entropy diagnostic.

use crate::error::{Error, Result};
use crate::ops::{
    add_scalar, div_by_col, elu_feature_map, elu_feature_map_plain, matmul, matmul_plain,
    reshape, softmax_scaled, sum_axis0,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Stabilizer in the linear-attention denominator.
pub const LINEAR_ATTENTION_EPS: f64 = 1e-6;

/// Tolerance when validating that entropy inputs are probability rows.
pub const ENTROPY_ROW_SUM_TOL: f64 = 1e-4;

/// Default anchor for the adaptive scale: the mean token count the cost-volume
/// transformer sees during full-scale training (36·48·16 · averaged ≈ 12186).
pub const DEFAULT_TRAIN_MEAN_LEN: usize = 12186;

/// Which attention kernel a block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Vanilla,
    Linear,
}

/// Full attention configuration for a multi-head layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    pub scaling: AttentionScaling,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("attention config: heads must be positive"));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "attention config: d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        match self.scaling {
            AttentionScaling::Adaptive { n_bar } if n_bar < 2 => {
                return Err(Error::config(format!("attention config: n_bar {n_bar} must be >= 2")));
            }
            AttentionScaling::Fixed(l) if !(l > 0.0 && l.is_finite()) => {
                return Err(Error::config(format!("attention config: fixed scale {l} must be positive")));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// How softmax logits are scaled before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionScaling {
    /// The conventional `1/sqrt(d_h)`.
    Default,
    /// Length-adaptive scale from [`aas_scale`], anchored at the training
    /// mean sequence length.
    Adaptive { n_bar: usize },
    /// A caller-supplied positive constant.
    Fixed(f64),
}

impl AttentionScaling {
    /// The effective λ for a call with key length `n_k` and head dim `d_h`.
    pub fn resolve(self, n_k: usize, d_h: usize) -> Result<f64> {
        match self {
            AttentionScaling::Default => {
                if d_h == 0 {
                    return Err(Error::invalid("attention_scaling", "head dim must be positive"));
                }
                Ok(1.0 / (d_h as f64).sqrt())
            }
            AttentionScaling::Adaptive { n_bar } => aas_scale(n_k, d_h, n_bar),
            AttentionScaling::Fixed(l) => {
                if !(l > 0.0) {
                    return Err(Error::invalid("attention_scaling", format!("fixed scale {l} must be positive")));
                }
                Ok(l)
            }
        }
    }
}

/// Length-adaptive attention scale `λ = ln n / (√d · ln n̄)`.
///
/// Evaluated as `(ln n / ln n̄) / √d` so that `n = n̄` yields exactly the
/// default `1/√d` bit-for-bit. The logarithm base cancels in the ratio;
/// natural log is used.
pub fn aas_scale(n: usize, d: usize, n_bar: usize) -> Result<f64> {
    if n < 2 || n_bar < 2 {
        return Err(Error::invalid(
            "aas_scale",
            format!("sequence lengths must be >= 2 (n={n}, n_bar={n_bar})"),
        ));
    }
    if d == 0 {
        return Err(Error::invalid("aas_scale", "head dim must be positive"));
    }
    Ok(((n as f64).ln() / (n_bar as f64).ln()) / (d as f64).sqrt())
}

/// Shannon entropy of probability rows along the trailing axis, `0·ln 0 = 0`.
///
/// Validates that every row sums to 1 within [`ENTROPY_ROW_SUM_TOL`]. A
/// rank-1 input produces a rank-0 (scalar) tensor.
pub fn attention_entropy<T: Real>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.rank() == 0 {
        return Err(Error::shape("attention_entropy", "need at least one axis"));
    }
    let n = *probs.shape().last().unwrap();
    if n == 0 {
        return Err(Error::shape("attention_entropy", "empty trailing axis"));
    }
    let rows = probs.numel() / n;
    let pd = probs.data();
    let mut out = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &pd[r * n..(r + 1) * n];
        let mut sum = T::zero();
        let mut h = T::zero();
        for &p in row {
            if p < T::zero() || !p.is_finite() {
                return Err(Error::invalid("attention_entropy", format!("invalid probability {p:?}")));
            }
            sum = sum + p;
            if p > T::zero() {
                h = h - p * p.ln();
            }
        }
        if (sum.to_f64() - 1.0).abs() > ENTROPY_ROW_SUM_TOL {
            return Err(Error::invalid(
                "attention_entropy",
                format!("row {r} sums to {} (not a probability row)", sum.to_f64()),
            ));
        }
        out[r] = h;
    }
    let shape = &probs.shape()[..probs.rank() - 1];
    Tensor::new(shape, out)
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape(
            "attention",
            format!("expected rank-2 Q/K/V, got {:?}/{:?}/{:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (n_q, d_h) = (q.shape()[0], q.shape()[1]);
    let n_k = k.shape()[0];
    if k.shape()[1] != d_h || v.shape()[0] != n_k || v.shape()[1] != d_h {
        return Err(Error::shape(
            "attention",
            format!("inconsistent Q {:?} / K {:?} / V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if n_q == 0 || n_k == 0 || d_h == 0 {
        return Err(Error::shape("attention", "empty attention operands"));
    }
    Ok((n_q, n_k, d_h))
}

/// Softmax attention `softmax(λ·QKᵀ)·V` for one head, evaluated row by row.
///
/// Memory stays `O(n_k + d_h)` beyond the output: the score matrix is never
/// materialized. The arithmetic per row follows the exact same operation
/// order as the composed tape path (dot products ascending over keys,
/// max-subtracted exponentials, then value accumulation ascending over keys),
/// so results agree bit-for-bit with [`vanilla_attention`].
pub fn vanilla_attention_plain<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    Ok(vanilla_attention_with_entropy_plain(q, k, v, lambda)?.0)
}

/// As [`vanilla_attention_plain`], additionally returning the per-query
/// entropy of the attention distribution (`[n_q]`).
pub fn vanilla_attention_with_entropy_plain<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lambda: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n_q, n_k, d_h) = check_qkv(q, k, v)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("vanilla_attention", format!("scale {lambda} must be positive")));
    }
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let scale = T::of(lambda);
    let mut out = vec![T::zero(); n_q * d_h];
    let mut entropy = vec![T::zero(); n_q];
    let mut scores = vec![T::zero(); n_k];
    for i in 0..n_q {
        let qrow = &qd[i * d_h..(i + 1) * d_h];
        // Scaled scores, in the same order the matmul + softmax kernels use.
        for j in 0..n_k {
            let krow = &kd[j * d_h..(j + 1) * d_h];
            let mut dot = T::zero();
            for c in 0..d_h {
                dot = dot + qrow[c] * krow[c];
            }
            if !dot.is_finite() {
                return Err(Error::non_finite("vanilla_attention", "non-finite attention score"));
            }
            scores[j] = dot * scale;
        }
        let mut mx = scores[0];
        for &s in &scores[1..] {
            if s > mx {
                mx = s;
            }
        }
        let mut sum = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            sum = sum + *s;
        }
        let inv = T::one() / sum;
        let orow = &mut out[i * d_h..(i + 1) * d_h];
        let mut h = T::zero();
        for j in 0..n_k {
            let p = scores[j] * inv;
            let vrow = &vd[j * d_h..(j + 1) * d_h];
            for c in 0..d_h {
                orow[c] = orow[c] + p * vrow[c];
            }
            if p > T::zero() {
                h = h - p * p.ln();
            }
        }
        entropy[i] = h;
    }
    Ok((Tensor::new(&[n_q, d_h], out)?, Tensor::new(&[n_q], entropy)?))
}

/// Differentiable softmax attention for one head: `softmax(λ·QKᵀ)·V`.
pub fn vanilla_attention<T: Real>(
    tape: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("vanilla_attention", format!("scale {lambda} must be positive")));
    }
    let scores = matmul(tape, q, k, false, true)?;
    let probs = softmax_scaled(tape, scores, lambda)?;
    matmul(tape, probs, v, false, false)
}

/// Kernelized linear attention with the `elu(x)+1` feature map:
/// `out_i = φ(q_i)ᵀ (Σ_j φ(k_j) v_jᵀ) / (φ(q_i)ᵀ Σ_j φ(k_j) + ε)`.
/// Runs in `O(n·d²)` time.
pub fn linear_attention_plain<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_q, n_k, d_h) = check_qkv(q, k, v)?;
    let fq = elu_feature_map_plain(q);
    let fk = elu_feature_map_plain(k);
    // kv[c][e] = sum_j fk[j][c] * v[j][e]
    let kv = matmul_plain(&fk, v, true, false)?;
    let num = matmul_plain(&fq, &kv, false, false)?;
    let fkd = fk.data();
    let mut ksum = vec![T::zero(); d_h];
    for j in 0..n_k {
        for c in 0..d_h {
            ksum[c] = ksum[c] + fkd[j * d_h + c];
        }
    }
    let fqd = fq.data();
    let nd = num.data();
    let eps = T::of(LINEAR_ATTENTION_EPS);
    let mut out = vec![T::zero(); n_q * d_h];
    for i in 0..n_q {
        let mut den = T::zero();
        for c in 0..d_h {
            den = den + fqd[i * d_h + c] * ksum[c];
        }
        den = den + eps;
        let inv = T::one() / den;
        for c in 0..d_h {
            out[i * d_h + c] = nd[i * d_h + c] * inv;
        }
    }
    Tensor::new(&[n_q, d_h], out)
}

/// Differentiable kernelized linear attention (see [`linear_attention_plain`]).
pub fn linear_attention<T: Real>(
    tape: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let (_, _, d_h) = check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    let fq = elu_feature_map(tape, q)?;
    let fk = elu_feature_map(tape, k)?;
    let kv = matmul(tape, fk, v, true, false)?;
    let num = matmul(tape, fq, kv, false, false)?;
    let ksum = sum_axis0(tape, fk)?;
    let ksum_col = reshape(tape, ksum, &[d_h, 1])?;
    let den_col = matmul(tape, fq, ksum_col, false, false)?;
    let n_q = tape.value(den_col).shape()[0];
    let den = reshape(tape, den_col, &[n_q])?;
    let den = add_scalar(tape, den, LINEAR_ATTENTION_EPS)?;
    div_by_col(tape, num, den)
}
