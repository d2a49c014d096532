//! Depth readout and supervision: per-pixel hypothesis volumes, softmax
//! expectation with a temperature, winner-take-all argmax, classification
//! targets over hypothesis bins, and threshold error metrics.

use crate::error::{Error, Result};
use crate::geometry::{inverse_depth_hypotheses, DepthHypotheses};
use crate::ops::{
    mul_const, reshape, softmax_scaled, softmax_scaled_plain, sum_axis0, sum_axis0_plain,
    transpose2d, transpose2d_plain,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Error thresholds (mm) reported by [`depth_error_ratios`] callers.
pub const DEPTH_ERROR_THRESHOLDS_MM: [f64; 3] = [2.0, 4.0, 8.0];

/// Per-pixel depth hypotheses `[D, H, W]` in millimeters.
///
/// The coarsest stage broadcasts one global hypothesis ladder to every pixel;
/// refinement stages center a narrower ladder on each pixel's previous
/// estimate. Along the depth axis values are ordered near → far (increasing
/// depth, uniformly spaced in inverse depth).
#[derive(Debug, Clone)]
pub struct HypothesisVolume {
    /// Hypothesis depths `[D, H, W]`.
    pub depths: Tensor<f64>,
    /// Cascade stage the volume belongs to.
    pub stage: usize,
}

impl HypothesisVolume {
    /// Tiles a global hypothesis ladder over an `height x width` grid.
    pub fn broadcast(hyps: &DepthHypotheses, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("hypothesis_volume", "empty pixel grid"));
        }
        let d = hyps.values.len();
        let hw = height * width;
        let mut data = vec![0.0; d * hw];
        for (k, &v) in hyps.values.iter().enumerate() {
            data[k * hw..(k + 1) * hw].fill(v);
        }
        Ok(Self { depths: Tensor::new(&[d, height, width], data)?, stage: hyps.stage })
    }

    /// Builds per-pixel refinement ladders centered on a previous depth map
    /// (`[H, W]`), each spanning `span_fraction` of the full inverse-depth
    /// range and clamped inside `[d_near, d_far]`.
    pub fn refine(
        prev_depth: &Tensor<f64>,
        d_near: f64,
        d_far: f64,
        count: usize,
        stage: usize,
        span_fraction: f64,
    ) -> Result<Self> {
        if prev_depth.rank() != 2 {
            return Err(Error::shape(
                "hypothesis_volume",
                format!("previous depth must be [H,W], got {:?}", prev_depth.shape()),
            ));
        }
        if stage == 0 {
            return Err(Error::invalid(
                "hypothesis_volume",
                "refinement ladders start at stage 1",
            ));
        }
        let (h, w) = (prev_depth.shape()[0], prev_depth.shape()[1]);
        let hw = h * w;
        let mut data = vec![0.0; count * hw];
        for p in 0..hw {
            let center = prev_depth.data()[p].clamp(d_near, d_far);
            let ladder = inverse_depth_hypotheses(
                d_near,
                d_far,
                count,
                stage,
                Some(center),
                Some(span_fraction),
            )?;
            for (k, &v) in ladder.values.iter().enumerate() {
                data[k * hw + p] = v;
            }
        }
        Ok(Self { depths: Tensor::new(&[count, h, w], data)?, stage })
    }

    pub fn count(&self) -> usize {
        self.depths.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.depths.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depths.shape()[2]
    }

    /// Depth map of hypothesis `k` (row-major `H*W` slice).
    pub fn slice(&self, k: usize) -> Result<&[f64]> {
        let hw = self.height() * self.width();
        if k >= self.count() {
            return Err(Error::invalid(
                "hypothesis_volume",
                format!("hypothesis {k} out of range 0..{}", self.count()),
            ));
        }
        Ok(&self.depths.data()[k * hw..(k + 1) * hw])
    }

    /// Whether hypothesis `k` holds one constant depth (always true for
    /// broadcast volumes), returning it if so.
    pub fn constant_depth(&self, k: usize) -> Result<Option<f64>> {
        let s = self.slice(k)?;
        let first = s[0];
        Ok(if s.iter().all(|&v| v == first) { Some(first) } else { None })
    }

    /// The swept window `[min, max]` at pixel `p`.
    pub fn pixel_window(&self, p: usize) -> Result<(f64, f64)> {
        let hw = self.height() * self.width();
        if p >= hw {
            return Err(Error::invalid("hypothesis_volume", format!("pixel {p} out of range")));
        }
        let d = self.count();
        let near = self.depths.data()[p];
        let far = self.depths.data()[(d - 1) * hw + p];
        Ok((near.min(far), near.max(far)))
    }

    /// The depth ladder converted to the model's scalar type, `[D, H, W]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(self.depths.shape(), |i| T::of(self.depths.data()[i]))
    }

    fn check_logits<T: Real>(&self, logits: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if logits.shape() != self.depths.shape() {
            return Err(Error::shape(
                "depth_readout",
                format!(
                    "logits {:?} do not match hypothesis volume {:?}",
                    logits.shape(),
                    self.depths.shape()
                ),
            ));
        }
        Ok((self.count(), self.height(), self.width()))
    }
}

fn check_temperature(tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(
            "depth_expectation",
            format!("temperature {tau} must be positive and finite"),
        ));
    }
    Ok(1.0 / tau)
}

/// Differentiable soft-argmax depth: `softmax(logits/τ)` along the hypothesis
/// axis, then the expectation over each pixel's hypothesis depths. Input
/// `[D, H, W]`, output `[H, W]`.
pub fn depth_expectation<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    vol: &HypothesisVolume,
    tau: f64,
) -> Result<NodeId> {
    let scale = check_temperature(tau)?;
    let (d, h, w) = vol.check_logits(tape.value(logits))?;
    let hw = h * w;
    let depths_t = transpose2d_plain(&vol.to_tensor::<T>().reshaped(&[d, hw])?)?;
    let flat = reshape(tape, logits, &[d, hw])?;
    let rows = transpose2d(tape, flat)?;
    let probs = softmax_scaled(tape, rows, scale)?;
    let weighted = mul_const(tape, probs, &depths_t)?;
    let cols = transpose2d(tape, weighted)?;
    let summed = sum_axis0(tape, cols)?;
    reshape(tape, summed, &[h, w])
}

/// Non-recording forward of [`depth_expectation`]; identical arithmetic.
pub fn depth_expectation_plain<T: Real>(
    logits: &Tensor<T>,
    vol: &HypothesisVolume,
    tau: f64,
) -> Result<Tensor<T>> {
    let scale = check_temperature(tau)?;
    let (d, h, w) = vol.check_logits(logits)?;
    let hw = h * w;
    let depths_t = transpose2d_plain(&vol.to_tensor::<T>().reshaped(&[d, hw])?)?;
    let rows = transpose2d_plain(&logits.reshaped(&[d, hw])?)?;
    let probs = softmax_scaled_plain(&rows, scale)?;
    let weighted = probs.zip_map(&depths_t, "mul", |a, b| a * b)?;
    let cols = transpose2d_plain(&weighted)?;
    let summed = sum_axis0_plain(&cols)?;
    summed.reshaped(&[h, w])
}

/// Per-pixel maximum softmax probability (`[H, W]`, values in `(0, 1]`), the
/// confidence attached to an expectation readout at temperature `τ`.
pub fn softmax_confidence_plain<T: Real>(
    logits: &Tensor<T>,
    vol: &HypothesisVolume,
    tau: f64,
) -> Result<Tensor<f64>> {
    let scale = check_temperature(tau)?;
    let (d, h, w) = vol.check_logits(logits)?;
    let hw = h * w;
    let rows = transpose2d_plain(&logits.reshaped(&[d, hw])?)?;
    let probs = softmax_scaled_plain(&rows, scale)?;
    let pd = probs.data();
    let mut out = vec![0.0f64; hw];
    for (p, slot) in out.iter_mut().enumerate() {
        let row = &pd[p * d..(p + 1) * d];
        let mut best = row[0];
        for &v in &row[1..] {
            if v > best {
                best = v;
            }
        }
        *slot = best.to_f64();
    }
    Tensor::new(&[h, w], out)
}

/// Winner-take-all depth: the hypothesis with the highest score per pixel;
/// ties resolve to the smaller hypothesis index (nearer depth plane). Accepts
/// raw cost-volume scores or regularized logits, `[D, H, W]`.
pub fn wta_depth<T: Real>(scores: &Tensor<T>, vol: &HypothesisVolume) -> Result<Tensor<f64>> {
    let (d, h, w) = vol.check_logits(scores)?;
    scores.ensure_finite("wta_depth scores")?;
    let hw = h * w;
    let sd = scores.data();
    let dd = vol.depths.data();
    let mut out = vec![0.0f64; hw];
    for p in 0..hw {
        let mut best_k = 0usize;
        let mut best = sd[p];
        for k in 1..d {
            let v = sd[k * hw + p];
            if v > best {
                best = v;
                best_k = k;
            }
        }
        out[p] = dd[best_k * hw + p];
    }
    Tensor::new(&[h, w], out)
}

/// Classification targets over hypothesis bins: for each pixel the index of
/// the bin nearest to the ground truth in inverse depth, or `-1` when the
/// pixel is masked out, has non-positive ground truth, or the ground truth
/// falls outside the pixel's swept window.
pub fn ce_depth_targets(
    vol: &HypothesisVolume,
    gt_depth: &Tensor<f64>,
    valid: &Tensor<f64>,
) -> Result<Vec<i32>> {
    let (h, w) = (vol.height(), vol.width());
    if gt_depth.shape() != [h, w] || valid.shape() != [h, w] {
        return Err(Error::shape(
            "ce_depth_targets",
            format!(
                "ground truth {:?} / mask {:?} must both be [{h}, {w}]",
                gt_depth.shape(),
                valid.shape()
            ),
        ));
    }
    let d = vol.count();
    let hw = h * w;
    let dd = vol.depths.data();
    let mut targets = vec![-1i32; hw];
    for p in 0..hw {
        if valid.data()[p] <= 0.5 {
            continue;
        }
        let gt = gt_depth.data()[p];
        if !(gt > 0.0) || !gt.is_finite() {
            continue;
        }
        let (lo, hi) = vol.pixel_window(p)?;
        if gt < lo || gt > hi {
            continue;
        }
        let inv_gt = 1.0 / gt;
        let mut best_k = 0usize;
        let mut best = (1.0 / dd[p] - inv_gt).abs();
        for k in 1..d {
            let dist = (1.0 / dd[k * hw + p] - inv_gt).abs();
            if dist < best {
                best = dist;
                best_k = k;
            }
        }
        targets[p] = best_k as i32;
    }
    Ok(targets)
}

/// Differentiable mean cross-entropy between hypothesis-bin logits
/// (`[D, H, W]`) and the nearest-inverse-depth bin of the ground truth.
/// Errors if every pixel ends up masked.
pub fn ce_depth_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    vol: &HypothesisVolume,
    gt_depth: &Tensor<f64>,
    valid: &Tensor<f64>,
) -> Result<NodeId> {
    vol.check_logits(tape.value(logits))?;
    let targets = ce_depth_targets(vol, gt_depth, valid)?;
    crate::ops::cross_entropy_depth(tape, logits, &targets)
}

/// Non-recording forward of [`ce_depth_loss`]: the mean loss and the number
/// of supervised pixels.
pub fn ce_depth_loss_plain<T: Real>(
    logits: &Tensor<T>,
    vol: &HypothesisVolume,
    gt_depth: &Tensor<f64>,
    valid: &Tensor<f64>,
) -> Result<(T, usize)> {
    vol.check_logits(logits)?;
    let targets = ce_depth_targets(vol, gt_depth, valid)?;
    crate::ops::cross_entropy_depth_plain(logits, &targets)
}

/// Fractions of valid pixels whose |prediction − ground truth| strictly
/// exceeds each threshold (thresholds in the same millimeter unit as the
/// depths). Errors when the mask selects no pixel.
pub fn depth_error_ratios(
    pred: &Tensor<f64>,
    gt_depth: &Tensor<f64>,
    valid: &Tensor<f64>,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if pred.shape() != gt_depth.shape() || pred.shape() != valid.shape() {
        return Err(Error::shape(
            "depth_error_ratios",
            format!(
                "prediction {:?}, ground truth {:?}, mask {:?} must agree",
                pred.shape(),
                gt_depth.shape(),
                valid.shape()
            ),
        ));
    }
    let mut counts = vec![0usize; thresholds.len()];
    let mut total = 0usize;
    for p in 0..pred.numel() {
        if valid.data()[p] <= 0.5 {
            continue;
        }
        total += 1;
        let err = (pred.data()[p] - gt_depth.data()[p]).abs();
        for (c, &t) in counts.iter_mut().zip(thresholds.iter()) {
            if err > t {
                *c += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("depth_error_ratios", "mask selects no pixel"));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// One cascade stage's readout: expectation depth, its confidence, and the
/// hypothesis ladder that produced them.
#[derive(Debug, Clone)]
pub struct DepthPrediction<T: Real> {
    /// Expectation depth map `[H, W]` (mm).
    pub depth: Tensor<f64>,
    /// Maximum softmax probability per pixel, `(0, 1]`.
    pub confidence: Tensor<f64>,
    /// Regularized hypothesis logits `[D, H, W]`.
    pub logits: Tensor<T>,
    /// The hypothesis ladder the logits score.
    pub hypotheses: HypothesisVolume,
}

impl<T: Real> DepthPrediction<T> {
    /// Builds the readout from logits at temperature `τ`.
    pub fn from_logits(logits: Tensor<T>, vol: HypothesisVolume, tau: f64) -> Result<Self> {
        let expect = depth_expectation_plain(&logits, &vol, tau)?;
        let depth = Tensor::new(
            &[vol.height(), vol.width()],
            expect.data().iter().map(|&v| Real::to_f64(v)).collect::<Vec<_>>(),
        )?;
        let confidence = softmax_confidence_plain(&logits, &vol, tau)?;
        Ok(Self { depth, confidence, logits, hypotheses: vol })
    }
}
