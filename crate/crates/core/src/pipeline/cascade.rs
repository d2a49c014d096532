//! The coarse-to-fine depth pipeline: feature extraction, per-stage cost
//! volumes, regularization, and depth readout chained across resolutions.
//!
//! Stage 0 runs at 1/8 resolution, sweeps fronto-parallel planes over the
//! full scene depth range, and may regularize with the cost-volume
//! transformer. Every later stage doubles the resolution, re-centers a
//! narrower per-pixel hypothesis window on the previous stage's depth map
//! (detached — no gradient flows through window placement), and regularizes
//! with a small 3-D convolution. Each stage is supervised independently
//! through cross-entropy over its own hypothesis bins.

use crate::attention::AttentionScaling;
use crate::blocks::{cvt_regularize, cvt_regularize_plain, CostVolumeTransformerParams};
use crate::error::{Error, Result};
use crate::geometry::{inverse_depth_hypotheses, Camera, DepthHypotheses};
use crate::ops::{
    add, conv2d, conv2d_plain, conv3d, conv3d_plain, gelu, gelu_plain, reshape,
    upsample2x_nearest, upsample2x_nearest_plain,
};
use crate::pipeline::backbone::{
    extract_features, extract_features_plain, BackboneStub, FeatureExtractorParams,
    FEATURE_CHANNELS,
};
use crate::pipeline::cost::{build_cost_volume, build_cost_volume_plain, fully_swept_mask};
use crate::pipeline::depth::{ce_depth_loss, ce_depth_loss_plain, DepthPrediction, HypothesisVolume};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};
use rand_chacha::ChaCha8Rng;

/// Hidden channels of the 3-D convolution regularizer.
const CONV3D_HIDDEN: usize = 8;
/// Resolution exponent of the coarsest stage (features come out at 1/8).
pub const COARSE_SCALE_LOG2: u32 = 3;

/// Which module turns a cost volume into per-hypothesis logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    /// Transformer over patchified cost tokens; coarsest stage only.
    CostTransformer,
    /// Two 3-D convolutions with a gelu between.
    Conv3d,
}

/// One cascade stage.
#[derive(Debug, Clone, Copy)]
pub struct StageConfig {
    /// Stage resolution is `image / 2^scale_log2`; consecutive stages halve
    /// the exponent.
    pub scale_log2: u32,
    /// Depth hypotheses swept at this stage.
    pub depth_count: usize,
    /// Width of the refinement window as a fraction of the full
    /// inverse-depth range; unused at stage 0.
    pub span_fraction: f64,
    pub regularizer: RegularizerKind,
}

/// Full pipeline configuration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Correlation groups of every cost volume.
    pub groups: usize,
    pub stages: Vec<StageConfig>,
    /// Cross-view attention in the feature extractor.
    pub use_sva: bool,
    /// Frustum positional encoding in the cost transformer.
    pub use_fpe: bool,
    /// Attention scaling of the cost transformer.
    pub cvt_scaling: AttentionScaling,
    /// Softmax temperature of the depth expectation during training.
    pub train_temperature: f64,
    /// Softmax temperature at inference.
    pub infer_temperature: f64,
}

impl ModelConfig {
    /// Two-stage configuration sized for desk-scale experiments.
    pub fn toy_default() -> Self {
        Self {
            groups: 8,
            stages: vec![
                StageConfig {
                    scale_log2: COARSE_SCALE_LOG2,
                    depth_count: 16,
                    span_fraction: 1.0,
                    regularizer: RegularizerKind::CostTransformer,
                },
                StageConfig {
                    scale_log2: COARSE_SCALE_LOG2 - 1,
                    depth_count: 8,
                    span_fraction: 0.25,
                    regularizer: RegularizerKind::Conv3d,
                },
            ],
            use_sva: true,
            use_fpe: true,
            cvt_scaling: AttentionScaling::Adaptive { n_bar: 48 },
            train_temperature: 2.0,
            infer_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || FEATURE_CHANNELS % self.groups != 0 {
            return Err(Error::invalid(
                "model_config",
                format!("groups {} must divide the {FEATURE_CHANNELS} feature channels", self.groups),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("model_config", "need at least one stage"));
        }
        if self.stages[0].scale_log2 != COARSE_SCALE_LOG2 {
            return Err(Error::invalid(
                "model_config",
                format!(
                    "stage 0 must run at 1/{} (scale_log2 {COARSE_SCALE_LOG2}), got {}",
                    1 << COARSE_SCALE_LOG2,
                    self.stages[0].scale_log2
                ),
            ));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.depth_count < 2 {
                return Err(Error::invalid(
                    "model_config",
                    format!("stage {s} needs >= 2 hypotheses, got {}", stage.depth_count),
                ));
            }
            if s > 0 {
                if stage.scale_log2 + 1 != self.stages[s - 1].scale_log2 {
                    return Err(Error::invalid(
                        "model_config",
                        format!("stage {s} must halve the previous stage's scale exponent"),
                    ));
                }
                if stage.regularizer == RegularizerKind::CostTransformer {
                    return Err(Error::invalid(
                        "model_config",
                        format!("stage {s}: the cost transformer regularizes only the coarsest stage"),
                    ));
                }
                if !(stage.span_fraction > 0.0 && stage.span_fraction <= 1.0) {
                    return Err(Error::invalid(
                        "model_config",
                        format!("stage {s} span fraction {} outside (0, 1]", stage.span_fraction),
                    ));
                }
            } else if stage.regularizer == RegularizerKind::CostTransformer
                && stage.depth_count % 2 != 0
            {
                return Err(Error::invalid(
                    "model_config",
                    "the cost transformer needs an even hypothesis count",
                ));
            }
        }
        for (name, t) in [
            ("train", self.train_temperature),
            ("infer", self.infer_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(
                    "model_config",
                    format!("{name} temperature {t} must be positive and finite"),
                ));
            }
        }
        Ok(())
    }
}

/// Trainable weights of one 3-D convolution regularizer.
#[derive(Debug, Clone)]
pub struct Conv3dRegularizerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Conv3dRegularizerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add_uniform_init(
                format!("{prefix}.w1"),
                &[CONV3D_HIDDEN, groups, 3, 3, 3],
                groups * 27,
                rng,
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[CONV3D_HIDDEN]), true)?,
            w2: store.add_uniform_init(
                format!("{prefix}.w2"),
                &[1, CONV3D_HIDDEN, 3, 3, 3],
                CONV3D_HIDDEN * 27,
                rng,
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1]), true)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-stage regularizer weights.
#[derive(Debug, Clone)]
pub enum StageRegularizerParams {
    Cvt(CostVolumeTransformerParams),
    Conv3d(Conv3dRegularizerParams),
}

/// Every trainable weight of the pipeline. The configuration records the
/// build request; the per-module ablation flags (`extractor.use_sva`,
/// cost-transformer `use_fpe`) are what the forward actually consults.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub extractor: FeatureExtractorParams,
    /// Per stage beyond the first: a 3x3 convolution applied after nearest
    /// upsampling to produce that stage's feature maps.
    pub stage_heads: Vec<(ParamId, ParamId)>,
    /// Regularizer weights aligned with the configured stages.
    pub regs: Vec<StageRegularizerParams>,
    pub config: ModelConfig,
}

impl ModelParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let extractor =
            FeatureExtractorParams::new(store, &format!("{prefix}.feat"), config.use_sva, rng)?;
        let c = FEATURE_CHANNELS;
        let mut stage_heads = Vec::with_capacity(config.stages.len().saturating_sub(1));
        for s in 1..config.stages.len() {
            stage_heads.push((
                store.add_uniform_init(format!("{prefix}.head{s}.w"), &[c, c, 3, 3], c * 9, rng)?,
                store.add(format!("{prefix}.head{s}.b"), Tensor::zeros(&[c]), true)?,
            ));
        }
        let mut regs = Vec::with_capacity(config.stages.len());
        for (s, stage) in config.stages.iter().enumerate() {
            regs.push(match stage.regularizer {
                RegularizerKind::CostTransformer => {
                    StageRegularizerParams::Cvt(CostVolumeTransformerParams::new(
                        store,
                        &format!("{prefix}.cvt"),
                        config.groups,
                        config.cvt_scaling,
                        config.use_fpe,
                        rng,
                    )?)
                }
                RegularizerKind::Conv3d => StageRegularizerParams::Conv3d(
                    Conv3dRegularizerParams::new(store, &format!("{prefix}.reg{s}"), config.groups, rng)?,
                ),
            });
        }
        Ok(Self { extractor, stage_heads, regs, config })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.extractor.param_ids();
        for (w, b) in &self.stage_heads {
            ids.push(*w);
            ids.push(*b);
        }
        for reg in &self.regs {
            match reg {
                StageRegularizerParams::Cvt(p) => ids.extend(p.param_ids()),
                StageRegularizerParams::Conv3d(p) => ids.extend(p.param_ids()),
            }
        }
        ids
    }
}

/// One stage's recorded outputs.
pub struct StageOutput<T: Real> {
    /// Per-hypothesis logits `[D, H_s, W_s]` on the tape.
    pub logits: NodeId,
    /// Detached depth readout (expectation, confidence, hypotheses).
    pub prediction: DepthPrediction<T>,
    /// Per-bin sweep validity `[D, H_s, W_s]`.
    pub valid: Tensor<f64>,
    /// Pixels where every hypothesis was swept `[H_s, W_s]`; the
    /// supervision and evaluation mask.
    pub supervised: Tensor<f64>,
}

/// One stage's outputs from the non-recording forward.
pub struct StageOutputPlain<T: Real> {
    pub logits: Tensor<T>,
    pub prediction: DepthPrediction<T>,
    pub valid: Tensor<f64>,
    pub supervised: Tensor<f64>,
}

fn check_forward_inputs<T: Real>(images: &[Tensor<T>], cameras: &[Camera]) -> Result<()> {
    if images.len() != cameras.len() {
        return Err(Error::invalid(
            "cascade_forward",
            format!("{} images vs {} cameras", images.len(), cameras.len()),
        ));
    }
    Ok(())
}

/// The stage-0 fronto-parallel ladder over the reference scene range.
fn coarse_ladder(cam: &Camera, count: usize) -> Result<DepthHypotheses> {
    inverse_depth_hypotheses(cam.d_near, cam.d_far, count, 0, None, None)
}

/// Nearest-neighbor 2x upsampling of a depth map (plain, f64).
fn upsample_depth(depth: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let up = upsample2x_nearest_plain(&depth.reshaped(&[1, h, w])?)?;
    up.reshaped(&[2 * h, 2 * w])
}

/// Runs the full cascade on the tape. `cameras` hold full-resolution
/// intrinsics; view 0 is the reference. `tau` is the expectation softmax
/// temperature.
pub fn cascade_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &ModelParams,
    backbone: &BackboneStub<T>,
    images: &[Tensor<T>],
    cameras: &[Camera],
    tau: f64,
) -> Result<Vec<StageOutput<T>>> {
    check_forward_inputs(images, cameras)?;
    let cfg = &params.config;
    let mut feats = extract_features(tape, store, &params.extractor, backbone, images)?;
    let mut outputs: Vec<StageOutput<T>> = Vec::with_capacity(cfg.stages.len());

    for (s, stage) in cfg.stages.iter().enumerate() {
        if s > 0 {
            let (wid, bid) = params.stage_heads[s - 1];
            let wn = tape.param(store, wid);
            let bn = tape.param(store, bid);
            for f in feats.iter_mut() {
                let up = upsample2x_nearest(tape, *f)?;
                let act = gelu(tape, up)?;
                *f = conv2d(tape, act, wn, bn, 1, 1)?;
            }
        }
        let scale = 1.0 / f64::from(1u32 << stage.scale_log2);
        let cams: Vec<Camera> =
            cameras.iter().map(|c| c.scaled(scale)).collect::<Result<_>>()?;
        let shape = tape.value(feats[0]).shape().to_vec();
        let (h_s, w_s) = (shape[1], shape[2]);

        let (vol, ladder) = if s == 0 {
            let ladder = coarse_ladder(&cams[0], stage.depth_count)?;
            (HypothesisVolume::broadcast(&ladder, h_s, w_s)?, Some(ladder))
        } else {
            let prev = upsample_depth(&outputs[s - 1].prediction.depth)?;
            (
                HypothesisVolume::refine(
                    &prev,
                    cams[0].d_near,
                    cams[0].d_far,
                    stage.depth_count,
                    s,
                    stage.span_fraction,
                )?,
                None,
            )
        };

        let srcs = feats[1..].to_vec();
        let cost = build_cost_volume(tape, feats[0], &srcs, &cams, &vol, cfg.groups)?;
        let logits = match &params.regs[s] {
            StageRegularizerParams::Cvt(p) => {
                let ladder = ladder.as_ref().expect("coarsest stage keeps its ladder");
                cvt_regularize(tape, store, p, cost.scores, &cams[0], ladder)?.0
            }
            StageRegularizerParams::Conv3d(p) => {
                let d = vol.count();
                let w1 = tape.param(store, p.w1);
                let b1 = tape.param(store, p.b1);
                let w2 = tape.param(store, p.w2);
                let b2 = tape.param(store, p.b2);
                let hid = conv3d(tape, cost.scores, w1, b1, 1, 1)?;
                let act = gelu(tape, hid)?;
                let out = conv3d(tape, act, w2, b2, 1, 1)?;
                reshape(tape, out, &[d, h_s, w_s])?
            }
        };
        let prediction = DepthPrediction::from_logits(tape.value(logits).clone(), vol, tau)?;
        let supervised = fully_swept_mask(&cost.valid)?;
        outputs.push(StageOutput { logits, prediction, valid: cost.valid, supervised });
    }
    Ok(outputs)
}

/// Non-recording forward of [`cascade_forward`]; identical arithmetic.
pub fn cascade_forward_plain<T: Real>(
    store: &ParamStore<T>,
    params: &ModelParams,
    backbone: &BackboneStub<T>,
    images: &[Tensor<T>],
    cameras: &[Camera],
    tau: f64,
) -> Result<Vec<StageOutputPlain<T>>> {
    check_forward_inputs(images, cameras)?;
    let cfg = &params.config;
    let mut feats = extract_features_plain(store, &params.extractor, backbone, images)?;
    let mut outputs: Vec<StageOutputPlain<T>> = Vec::with_capacity(cfg.stages.len());

    for (s, stage) in cfg.stages.iter().enumerate() {
        if s > 0 {
            let (wid, bid) = params.stage_heads[s - 1];
            for f in feats.iter_mut() {
                let up = upsample2x_nearest_plain(f)?;
                *f = conv2d_plain(&gelu_plain(&up), store.value(wid), store.value(bid), 1, 1)?;
            }
        }
        let scale = 1.0 / f64::from(1u32 << stage.scale_log2);
        let cams: Vec<Camera> =
            cameras.iter().map(|c| c.scaled(scale)).collect::<Result<_>>()?;
        let (h_s, w_s) = (feats[0].shape()[1], feats[0].shape()[2]);

        let (vol, ladder) = if s == 0 {
            let ladder = coarse_ladder(&cams[0], stage.depth_count)?;
            (HypothesisVolume::broadcast(&ladder, h_s, w_s)?, Some(ladder))
        } else {
            let prev = upsample_depth(&outputs[s - 1].prediction.depth)?;
            (
                HypothesisVolume::refine(
                    &prev,
                    cams[0].d_near,
                    cams[0].d_far,
                    stage.depth_count,
                    s,
                    stage.span_fraction,
                )?,
                None,
            )
        };

        let srcs: Vec<&Tensor<T>> = feats[1..].iter().collect();
        let cost = build_cost_volume_plain(&feats[0], &srcs, &cams, &vol, cfg.groups)?;
        let logits = match &params.regs[s] {
            StageRegularizerParams::Cvt(p) => {
                let ladder = ladder.as_ref().expect("coarsest stage keeps its ladder");
                cvt_regularize_plain(store, p, &cost.scores, &cams[0], ladder)?.0
            }
            StageRegularizerParams::Conv3d(p) => {
                let hid = conv3d_plain(
                    &cost.scores,
                    store.value(p.w1),
                    store.value(p.b1),
                    1,
                    1,
                )?;
                let out = conv3d_plain(
                    &gelu_plain(&hid),
                    store.value(p.w2),
                    store.value(p.b2),
                    1,
                    1,
                )?;
                out.reshaped(&[vol.count(), h_s, w_s])?
            }
        };
        let prediction = DepthPrediction::from_logits(logits.clone(), vol, tau)?;
        let supervised = fully_swept_mask(&cost.valid)?;
        outputs.push(StageOutputPlain { logits, prediction, valid: cost.valid, supervised });
    }
    Ok(outputs)
}

/// Nearest (top-left) downsampling of a full-resolution map by `2^scale_log2`.
pub fn downsample_nearest(map: &Tensor<f64>, scale_log2: u32) -> Result<Tensor<f64>> {
    if map.rank() != 2 {
        return Err(Error::shape(
            "downsample_nearest",
            format!("expected [H,W], got {:?}", map.shape()),
        ));
    }
    let s = 1usize << scale_log2;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(
            "downsample_nearest",
            format!("{h}x{w} not divisible by {s}"),
        ));
    }
    let (ho, wo) = (h / s, w / s);
    let data = map.data();
    Tensor::new(
        &[ho, wo],
        (0..ho * wo)
            .map(|i| data[(i / wo) * s * w + (i % wo) * s])
            .collect::<Vec<_>>(),
    )
}

/// Sum of per-stage cross-entropy losses against the nearest-downsampled
/// ground truth, masked to fully swept pixels.
pub fn cascade_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    outputs: &[StageOutput<T>],
    gt_depth: &Tensor<f64>,
) -> Result<NodeId> {
    if outputs.len() != params.config.stages.len() {
        return Err(Error::invalid("cascade_loss", "stage count mismatch"));
    }
    let mut total: Option<NodeId> = None;
    for (stage, out) in params.config.stages.iter().zip(outputs) {
        let gt_s = downsample_nearest(gt_depth, stage.scale_log2)?;
        let loss =
            ce_depth_loss(tape, out.logits, &out.prediction.hypotheses, &gt_s, &out.supervised)?;
        total = Some(match total {
            None => loss,
            Some(t) => add(tape, t, loss)?,
        });
    }
    total.ok_or_else(|| Error::invalid("cascade_loss", "no stages"))
}

/// Non-recording total loss and per-stage supervised pixel counts.
pub fn cascade_loss_plain<T: Real>(
    params: &ModelParams,
    outputs: &[StageOutputPlain<T>],
    gt_depth: &Tensor<f64>,
) -> Result<(T, Vec<usize>)> {
    if outputs.len() != params.config.stages.len() {
        return Err(Error::invalid("cascade_loss", "stage count mismatch"));
    }
    let mut total = T::zero();
    let mut counts = Vec::with_capacity(outputs.len());
    for (stage, out) in params.config.stages.iter().zip(outputs) {
        let gt_s = downsample_nearest(gt_depth, stage.scale_log2)?;
        let (loss, n) =
            ce_depth_loss_plain(&out.logits, &out.prediction.hypotheses, &gt_s, &out.supervised)?;
        total = total + loss;
        counts.push(n);
    }
    Ok((total, counts))
}
