//! Deterministic experiment rigs shared by the test suite and the CLI:
//! a winner-take-all probe of the raw cost volume against analytic scenes,
//! toy end-to-end cascade training with held-out evaluation, a
//! sequence-length extrapolation race for the cost-volume regularizer, a
//! layer-norm placement race, attention-entropy sweeps over sequence length,
//! and a finite-difference battery covering every differentiable kernel.
//!
//! Every rig is a pure function of its config: same config, same numbers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::attention::{
    aas_scale, attention_entropy, linear_attention, vanilla_attention, AttentionConfig,
    AttentionKind, AttentionScaling,
};
use crate::blocks::{
    cvt_regularize, cvt_regularize_plain, transformer_block, BlockConfig,
    CostVolumeTransformerParams, LnPlacement, TransformerBlockParams,
};
use crate::error::{Error, Result};
use crate::geometry::{inverse_depth_hypotheses, DepthHypotheses};
use crate::gradcheck::check_gradient;
use crate::ops::{
    add, add_bias, add_const, add_scalar, bilinear_sample, concat_cols, conv2d, conv3d,
    cross_entropy_depth, div_by_col, elu_feature_map, gelu, group_correlate, layer_norm, matmul,
    matmul_plain, mean_all, mul, mul_channel, mul_const, patchify3d, reshape, scale, slice_cols,
    softmax_scaled, softmax_scaled_plain, stack_depth, sub, sum_all, sum_axis0, transpose2d,
    unpatchify3d, upsample2x_nearest,
};
use crate::optimize::Adam;
use crate::pipeline::{
    build_cost_volume_plain, cascade_forward, cascade_forward_plain, cascade_loss,
    cascade_loss_plain, ce_depth_loss, ce_depth_targets, downsample_nearest, fully_swept_mask,
    BackboneStub, DepthPrediction, HypothesisVolume, ModelConfig, ModelParams,
};
use crate::scenes::{generate_scene, ideal_features, scene_seeds, GeometryKind, SceneConfig, SceneSample};
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{seeded_rng, Real, Tensor};

/// Depth-error thresholds (mm) reported by every evaluation in this module:
/// the fraction of pixels whose absolute depth error exceeds 2, 4, and 8 mm.
pub const ERROR_THRESHOLDS_MM: [f64; 3] = [2.0, 4.0, 8.0];

/// True when both tensors have the same shape and every element is
/// bit-identical (distinguishes `-0.0` from `0.0` and any NaN payloads).
pub fn tensors_bit_equal<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(&x, &y)| Real::to_f64(x).to_bits() == Real::to_f64(y).to_bits())
}

/// Mean over the group axis of a `[G, D, H, W]` matching volume → `[D, H, W]`.
pub fn group_mean_cost<T: Real>(cost: &Tensor<T>) -> Result<Tensor<T>> {
    if cost.rank() != 4 {
        return Err(Error::shape(
            "group_mean_cost",
            format!("expected [G, D, H, W], got {:?}", cost.shape()),
        ));
    }
    let (g, d, h, w) = (cost.shape()[0], cost.shape()[1], cost.shape()[2], cost.shape()[3]);
    let dhw = d * h * w;
    let mut out = vec![T::zero(); dhw];
    for gi in 0..g {
        let base = gi * dhw;
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + cost.data()[base + i];
        }
    }
    let inv = T::of(1.0 / g as f64);
    for o in &mut out {
        *o = *o * inv;
    }
    Tensor::new(&[d, h, w], out)
}

// ---------------------------------------------------------------------------
// Winner-take-all probe
// ---------------------------------------------------------------------------

/// Outcome of the winner-take-all probe over analytic scenes.
#[derive(Debug, Clone, Copy)]
pub struct WtaReport {
    /// Fraction of counted pixels whose cost-volume argmax bin equals the
    /// bin nearest the exact depth in inverse-depth distance.
    pub agreement: f64,
    /// Pixels counted: fully swept by every source view and with the exact
    /// depth inside the hypothesis window.
    pub pixels: usize,
    pub scenes: usize,
}

/// Matching-signal probe that bypasses all learned parameters: renders
/// textured scenes, swaps the feature extractor for analytic multi-offset
/// descriptors, sweeps the coarsest hypothesis ladder, and asks how often
/// the best-matching bin is the bin an exact depth oracle picks. Scenes
/// alternate planar and slanted geometry.
pub fn wta_oracle_check(
    dataset_seed: u64,
    scene_count: usize,
    cfg: &SceneConfig,
    depth_count: usize,
    groups: usize,
) -> Result<WtaReport> {
    if scene_count == 0 {
        return Err(Error::invalid("wta_oracle_check", "need at least one scene"));
    }
    cfg.validate()?;
    let scale_log2 = 3u32;
    let scale = 1usize << scale_log2;
    if cfg.height % scale != 0 || cfg.width % scale != 0 {
        return Err(Error::config(format!(
            "wta_oracle_check: image {}x{} must be divisible by {scale}",
            cfg.height, cfg.width
        )));
    }
    let seeds = scene_seeds(dataset_seed, scene_count);
    let mut agree = 0usize;
    let mut total = 0usize;
    for (i, &seed) in seeds.iter().enumerate() {
        let mut sc = cfg.clone();
        sc.geometry = if i % 2 == 0 { GeometryKind::Plane } else { GeometryKind::Slanted };
        let sample: SceneSample<f64> = generate_scene(seed, &sc)?;
        let feats = sample
            .images
            .iter()
            .map(|im| ideal_features(im, scale, groups))
            .collect::<Result<Vec<_>>>()?;
        let cams = sample
            .cameras
            .iter()
            .map(|c| c.scaled(1.0 / scale as f64))
            .collect::<Result<Vec<_>>>()?;
        let ladder =
            inverse_depth_hypotheses(cams[0].d_near, cams[0].d_far, depth_count, 0, None, None)?;
        let (h, w) = (sc.height / scale, sc.width / scale);
        let vol = HypothesisVolume::broadcast(&ladder, h, w)?;
        let srcs: Vec<&Tensor<f64>> = feats[1..].iter().collect();
        let cost = build_cost_volume_plain(&feats[0], &srcs, &cams, &vol, groups)?;
        let agg = group_mean_cost(&cost.scores)?;
        let sup = fully_swept_mask(&cost.valid)?;
        let gt = downsample_nearest(&sample.gt_depth, scale_log2)?;
        let targets = ce_depth_targets(&vol, &gt, &sup)?;
        let hw = h * w;
        for (p, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let mut best_k = 0usize;
            let mut best = agg.data()[p];
            for k in 1..depth_count {
                let v = agg.data()[k * hw + p];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            total += 1;
            if best_k == t as usize {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("wta_oracle_check", "no pixel was counted"));
    }
    Ok(WtaReport { agreement: agree as f64 / total as f64, pixels: total, scenes: scene_count })
}

// ---------------------------------------------------------------------------
// Toy end-to-end training
// ---------------------------------------------------------------------------

/// Toy-training configuration for the full cascade.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    /// Distinct training scenes cycled through round-robin, one per step.
    pub train_scenes: usize,
    /// Held-out scenes for the final evaluation.
    pub val_scenes: usize,
    pub steps: usize,
    pub lr: f64,
    /// Master seed: scene seeds and parameter init both derive from it.
    pub seed: u64,
    /// Record the training loss every this many steps (plus the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy_default(),
            scene: SceneConfig::default(),
            train_scenes: 200,
            val_scenes: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 7,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if self.steps == 0 || self.train_scenes == 0 || self.val_scenes == 0 || self.log_every == 0
        {
            return Err(Error::config(
                "train config: steps, train_scenes, val_scenes, log_every must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train config: learning rate must be positive and finite"));
        }
        Ok(())
    }
}

/// Pooled held-out evaluation of a trained cascade.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Fractions of supervised final-stage pixels whose absolute depth error
    /// exceeds each entry of [`ERROR_THRESHOLDS_MM`].
    pub error_ratios: Vec<f64>,
    pub pixels: usize,
    pub scenes: usize,
    /// Mean plain-forward cascade loss over the evaluated scenes.
    pub mean_loss: f64,
}

/// Loss trace plus final held-out metrics for one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// `(step, loss)` samples of the training loss.
    pub loss_curve: Vec<(usize, f64)>,
    pub eval: EvalReport,
    pub seconds: f64,
    pub steps: usize,
}

/// A trained cascade: the parameter store, parameter handles, the frozen
/// backbone instance used throughout training, and the run report.
pub struct TrainedPipeline {
    pub store: ParamStore<f32>,
    pub params: ModelParams,
    pub backbone: BackboneStub<f32>,
    pub report: TrainReport,
}

/// Scene seeds used by [`train_pipeline`]: training seeds first, then
/// validation seeds, all derived from the master seed.
pub fn train_val_seeds(cfg: &TrainConfig) -> (Vec<u64>, Vec<u64>) {
    let all = scene_seeds(cfg.seed ^ 0xDA7A_5E7, cfg.train_scenes + cfg.val_scenes);
    let (tr, va) = all.split_at(cfg.train_scenes);
    (tr.to_vec(), va.to_vec())
}

/// Trains the cascade on freshly rendered scenes (regenerated on the fly,
/// round-robin over a fixed seed list) with masked per-stage cross-entropy
/// and Adam, then evaluates on held-out scenes at inference temperature.
pub fn train_pipeline(cfg: &TrainConfig) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = seeded_rng(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let params = ModelParams::new(&mut store, "model", cfg.model.clone(), &mut rng)?;
    let backbone = BackboneStub::<f32>::new();
    let mut adam = Adam::new(cfg.lr);
    let (train_seeds, val_seeds) = train_val_seeds(cfg);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let sample: SceneSample<f32> =
            generate_scene(train_seeds[step % train_seeds.len()], &cfg.scene)?;
        let mut tape = Tape::new();
        let outs = cascade_forward(
            &mut tape,
            &store,
            &params,
            &backbone,
            &sample.images,
            &sample.cameras,
            cfg.model.train_temperature,
        )?;
        let loss = cascade_loss(&mut tape, &params, &outs, &sample.gt_depth)?;
        let lv = Real::to_f64(tape.value(loss).data()[0]);
        if !lv.is_finite() {
            return Err(Error::non_finite(
                "train_pipeline",
                format!("training loss diverged at step {step}"),
            ));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, lv));
        }
        let grads = tape.backward(loss)?;
        store.zero_grads();
        tape.accumulate_param_grads(&grads, &mut store)?;
        adam.step(&mut store)?;
    }
    let eval = evaluate_pipeline(
        &store,
        &params,
        &backbone,
        &cfg.scene,
        &val_seeds,
        cfg.model.infer_temperature,
    )?;
    let report =
        TrainReport { loss_curve: curve, eval, seconds: start.elapsed().as_secs_f64(), steps: cfg.steps };
    Ok(TrainedPipeline { store, params, backbone, report })
}

/// Plain-forward evaluation on the given scene seeds: pooled final-stage
/// error ratios over supervised pixels plus the mean cascade loss.
pub fn evaluate_pipeline(
    store: &ParamStore<f32>,
    params: &ModelParams,
    backbone: &BackboneStub<f32>,
    scene: &SceneConfig,
    seeds: &[u64],
    tau: f64,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("evaluate_pipeline", "need at least one scene seed"));
    }
    let last_scale = params
        .config
        .stages
        .last()
        .ok_or_else(|| Error::config("evaluate_pipeline: empty stage list"))?
        .scale_log2;
    let mut exceed = [0usize; 3];
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for &seed in seeds {
        let sample: SceneSample<f32> = generate_scene(seed, scene)?;
        let outs =
            cascade_forward_plain(store, params, backbone, &sample.images, &sample.cameras, tau)?;
        let (loss, _) = cascade_loss_plain(params, &outs, &sample.gt_depth)?;
        loss_sum += Real::to_f64(loss);
        let out = outs.last().expect("cascade produced no stage");
        let gt = downsample_nearest(&sample.gt_depth, last_scale)?;
        for p in 0..gt.numel() {
            if out.supervised.data()[p] <= 0.5 {
                continue;
            }
            total += 1;
            let err = (out.prediction.depth.data()[p] - gt.data()[p]).abs();
            for (c, &t) in exceed.iter_mut().zip(ERROR_THRESHOLDS_MM.iter()) {
                if err > t {
                    *c += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("evaluate_pipeline", "no supervised pixel in any scene"));
    }
    Ok(EvalReport {
        error_ratios: exceed.iter().map(|&c| c as f64 / total as f64).collect(),
        pixels: total,
        scenes: seeds.len(),
        mean_loss: loss_sum / seeds.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Sequence-length extrapolation race
// ---------------------------------------------------------------------------

/// Configuration of the cost-volume-regularizer extrapolation race: train on
/// short token sequences, evaluate on much longer ones, and compare the
/// length-adaptive + frustum-encoded variant against the default-scaled
/// variant without positional encoding.
#[derive(Debug, Clone)]
pub struct ExtrapolationConfig {
    pub seeds: Vec<u64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub lr: f64,
    pub depth_count: usize,
    pub groups: usize,
    pub views: usize,
    /// Reference image (height, width) for training cost volumes.
    pub train_size: (usize, usize),
    /// Larger (height, width) used only at evaluation time.
    pub eval_size: (usize, usize),
    /// Sequence-length anchor of the adaptive-scaling variant.
    pub n_bar: usize,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![11, 12, 13, 14, 15],
            train_scenes: 10,
            eval_scenes: 2,
            steps: 80,
            lr: 2e-3,
            depth_count: 16,
            groups: 8,
            views: 3,
            train_size: (256, 256),
            eval_size: (512, 1024),
            n_bar: 512,
        }
    }
}

impl ExtrapolationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("extrapolation config: need at least one seed"));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 || self.steps == 0 {
            return Err(Error::config(
                "extrapolation config: scenes and steps must be positive",
            ));
        }
        if self.depth_count < 2 || self.depth_count % 2 != 0 {
            return Err(Error::config("extrapolation config: depth count must be even and >= 2"));
        }
        for (h, w) in [self.train_size, self.eval_size] {
            if h % 32 != 0 || w % 32 != 0 {
                return Err(Error::config(format!(
                    "extrapolation config: image {h}x{w} must be divisible by 32"
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("extrapolation config: bad learning rate"));
        }
        Ok(())
    }

    /// Token count of the regularizer's attention at the given image size.
    pub fn tokens_at(&self, size: (usize, usize)) -> usize {
        (self.depth_count / 2) * (size.0 / 32) * (size.1 / 32)
    }
}

/// One seed's pooled held-out 4 mm error fractions at the long evaluation
/// sequence, for both variants.
#[derive(Debug, Clone, Copy)]
pub struct ExtrapolationOutcome {
    pub seed: u64,
    /// Length-adaptive scaling plus frustum positional encoding.
    pub e4_adaptive: f64,
    /// Default inverse-sqrt scaling, no positional encoding.
    pub e4_default: f64,
    pub train_tokens: usize,
    pub eval_tokens: usize,
}

struct CvtScene {
    cost: Tensor<f32>,
    gt: Tensor<f64>,
    sup: Tensor<f64>,
    cam_ref: crate::geometry::Camera,
}

fn cvt_scene(
    seed: u64,
    sc: &SceneConfig,
    ladder: &DepthHypotheses,
    groups: usize,
) -> Result<CvtScene> {
    let sample: SceneSample<f32> = generate_scene(seed, sc)?;
    let feats = sample
        .images
        .iter()
        .map(|im| ideal_features(im, 8, groups))
        .collect::<Result<Vec<_>>>()?;
    let cams = sample
        .cameras
        .iter()
        .map(|c| c.scaled(1.0 / 8.0))
        .collect::<Result<Vec<_>>>()?;
    let vol = HypothesisVolume::broadcast(ladder, sc.height / 8, sc.width / 8)?;
    let srcs: Vec<&Tensor<f32>> = feats[1..].iter().collect();
    let cost = build_cost_volume_plain(&feats[0], &srcs, &cams, &vol, groups)?;
    let sup = fully_swept_mask(&cost.valid)?;
    let gt = downsample_nearest(&sample.gt_depth, 3)?;
    Ok(CvtScene { cost: cost.scores, gt, sup, cam_ref: cams[0].clone() })
}

/// Runs the extrapolation race. For each seed, both variants start from
/// bit-identical initial weights and see identical training cost volumes
/// (precomputed once from analytic descriptors); they differ only in the
/// attention scale rule and the positional-encoding switch. Evaluation
/// renders larger scenes whose token count the regularizer never saw.
pub fn cvt_extrapolation_race(cfg: &ExtrapolationConfig) -> Result<Vec<ExtrapolationOutcome>> {
    cfg.validate()?;
    let mut outcomes = Vec::new();
    let base_scene = SceneConfig::default();
    let train_tokens = cfg.tokens_at(cfg.train_size);
    let eval_tokens = cfg.tokens_at(cfg.eval_size);
    for &seed in &cfg.seeds {
        let train_sc = SceneConfig {
            views: cfg.views,
            height: cfg.train_size.0,
            width: cfg.train_size.1,
            ..base_scene.clone()
        };
        let eval_sc = SceneConfig {
            views: cfg.views,
            height: cfg.eval_size.0,
            width: cfg.eval_size.1,
            ..base_scene.clone()
        };
        let ladder = inverse_depth_hypotheses(
            base_scene.d_near,
            base_scene.d_far,
            cfg.depth_count,
            0,
            None,
            None,
        )?;
        let train_seeds = scene_seeds(seed ^ 0x5EED_CAFE, cfg.train_scenes);
        let eval_seeds = scene_seeds(seed ^ 0xE7A1_11, cfg.eval_scenes);
        let train_data = train_seeds
            .iter()
            .map(|&s| cvt_scene(s, &train_sc, &ladder, cfg.groups))
            .collect::<Result<Vec<_>>>()?;
        let vol_train =
            HypothesisVolume::broadcast(&ladder, train_sc.height / 8, train_sc.width / 8)?;
        let vol_eval = HypothesisVolume::broadcast(&ladder, eval_sc.height / 8, eval_sc.width / 8)?;
        let variants = [
            (AttentionScaling::Adaptive { n_bar: cfg.n_bar }, true),
            (AttentionScaling::Default, false),
        ];
        let mut e4 = [0.0f64; 2];
        for (vi, &(scaling, use_fpe)) in variants.iter().enumerate() {
            let mut store = ParamStore::<f32>::new();
            let mut prng = seeded_rng(seed ^ 0xC0DE);
            let params = CostVolumeTransformerParams::new(
                &mut store,
                "reg",
                cfg.groups,
                scaling,
                use_fpe,
                &mut prng,
            )?;
            let mut adam = Adam::new(cfg.lr);
            for step in 0..cfg.steps {
                let datum = &train_data[step % train_data.len()];
                let mut tape = Tape::new();
                let cost = tape.constant(datum.cost.clone());
                let (logits, _) =
                    cvt_regularize(&mut tape, &store, &params, cost, &datum.cam_ref, &ladder)?;
                let loss = ce_depth_loss(&mut tape, logits, &vol_train, &datum.gt, &datum.sup)?;
                let lv = Real::to_f64(tape.value(loss).data()[0]);
                if !lv.is_finite() {
                    return Err(Error::non_finite(
                        "cvt_extrapolation_race",
                        format!("loss diverged at seed {seed}, variant {vi}, step {step}"),
                    ));
                }
                let grads = tape.backward(loss)?;
                store.zero_grads();
                tape.accumulate_param_grads(&grads, &mut store)?;
                adam.step(&mut store)?;
            }
            let mut exceed = 0usize;
            let mut total = 0usize;
            for &es in &eval_seeds {
                let datum = cvt_scene(es, &eval_sc, &ladder, cfg.groups)?;
                let (logits, _) =
                    cvt_regularize_plain(&store, &params, &datum.cost, &datum.cam_ref, &ladder)?;
                let pred = DepthPrediction::from_logits(logits, vol_eval.clone(), 1.0)?;
                for p in 0..datum.gt.numel() {
                    if datum.sup.data()[p] <= 0.5 {
                        continue;
                    }
                    total += 1;
                    if (pred.depth.data()[p] - datum.gt.data()[p]).abs() > 4.0 {
                        exceed += 1;
                    }
                }
            }
            if total == 0 {
                return Err(Error::invalid(
                    "cvt_extrapolation_race",
                    "no supervised pixel in any evaluation scene",
                ));
            }
            e4[vi] = exceed as f64 / total as f64;
        }
        outcomes.push(ExtrapolationOutcome {
            seed,
            e4_adaptive: e4[0],
            e4_default: e4[1],
            train_tokens,
            eval_tokens,
        });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Layer-norm placement race
// ---------------------------------------------------------------------------

/// Configuration of the pre- vs post-normalization training race on a fixed
/// random regression task.
#[derive(Debug, Clone)]
pub struct LnRaceConfig {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl Default for LnRaceConfig {
    fn default() -> Self {
        Self { seeds: vec![21, 22, 23, 24, 25], steps: 500, lr: 1e-3, blocks: 6, d_model: 32, heads: 4, tokens: 16 }
    }
}

/// Training loss of both placements after the configured number of steps.
/// A diverged run reports its non-finite loss as-is.
#[derive(Debug, Clone, Copy)]
pub struct LnRaceOutcome {
    pub seed: u64,
    pub pre_loss: f64,
    pub post_loss: f64,
}

/// Races identical block stacks (same init, same data, same optimizer) that
/// differ only in layer-norm placement, on a fixed random token-regression
/// task, and reports the training loss after the final step.
pub fn ln_placement_race(cfg: &LnRaceConfig) -> Result<Vec<LnRaceOutcome>> {
    if cfg.seeds.is_empty() || cfg.steps == 0 || cfg.blocks == 0 {
        return Err(Error::config("ln race config: seeds, steps, blocks must be non-empty"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("ln race config: bad learning rate"));
    }
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let mut drng = seeded_rng(seed ^ 0xDA7A);
        let x = Tensor::<f64>::uniform(&[cfg.tokens, cfg.d_model], -1.0, 1.0, &mut drng);
        let y = Tensor::<f64>::uniform(&[cfg.tokens, cfg.d_model], -1.0, 1.0, &mut drng);
        let mut losses = [0.0f64; 2];
        for (i, placement) in [LnPlacement::Pre, LnPlacement::Post].into_iter().enumerate() {
            let block_cfg = BlockConfig {
                d_model: cfg.d_model,
                expansion: 4,
                placement,
                attention: AttentionConfig {
                    d_model: cfg.d_model,
                    heads: cfg.heads,
                    kind: AttentionKind::Vanilla,
                    scaling: AttentionScaling::Default,
                },
            };
            let mut store = ParamStore::<f64>::new();
            let mut prng = seeded_rng(seed ^ 0x1217);
            let blocks = (0..cfg.blocks)
                .map(|b| {
                    TransformerBlockParams::new(&mut store, &format!("block{b}"), &block_cfg, &mut prng)
                })
                .collect::<Result<Vec<_>>>()?;
            let forward = |tape: &mut Tape<f64>, st: &ParamStore<f64>| -> Result<NodeId> {
                let mut h = tape.constant(x.clone());
                for bp in &blocks {
                    h = transformer_block(tape, st, bp, &block_cfg, h, None)?;
                }
                let t = tape.constant(y.clone());
                let d = sub(tape, h, t)?;
                let sq = mul(tape, d, d)?;
                mean_all(tape, sq)
            };
            let mut adam = Adam::new(cfg.lr);
            for _ in 0..cfg.steps {
                let mut tape = Tape::new();
                let loss = forward(&mut tape, &store)?;
                let grads = tape.backward(loss)?;
                store.zero_grads();
                tape.accumulate_param_grads(&grads, &mut store)?;
                adam.step(&mut store)?;
            }
            let mut tape = Tape::new();
            let loss = forward(&mut tape, &store)?;
            losses[i] = tape.value(loss).data()[0];
        }
        outcomes.push(LnRaceOutcome { seed, pre_loss: losses[0], post_loss: losses[1] });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Attention-entropy sweep
// ---------------------------------------------------------------------------

/// Configuration of the entropy-vs-sequence-length sweep.
#[derive(Debug, Clone)]
pub struct EntropyConfig {
    /// Head dimension of the random queries and keys.
    pub d_h: usize,
    /// Key-set sizes to sweep.
    pub lengths: Vec<usize>,
    /// Anchor length of the adaptive scale.
    pub n_bar: usize,
    /// Query rows averaged per measurement.
    pub rows: usize,
    pub seeds: Vec<u64>,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            lengths: vec![512, 8192],
            n_bar: 512,
            rows: 64,
            seeds: (31..41).collect(),
        }
    }
}

/// Mean attention entropy (nats) at one key-set size under both scale rules.
#[derive(Debug, Clone, Copy)]
pub struct EntropyPoint {
    pub n: usize,
    pub default_entropy: f64,
    pub adaptive_entropy: f64,
    pub default_scale: f64,
    pub adaptive_scale: f64,
}

fn mean_entropy(scores: &Tensor<f64>, lambda: f64) -> Result<f64> {
    let probs = softmax_scaled_plain(scores, lambda)?;
    let ent = attention_entropy(&probs)?;
    Ok(ent.data().iter().sum::<f64>() / ent.numel() as f64)
}

/// Standard-normal tensor via Box–Muller over the seeded generator.
fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = std::f64::consts::TAU * u2;
        data.push(r * th.cos());
        data.push(r * th.sin());
    }
    data.truncate(n);
    Tensor::new(shape, data).expect("shape/product mismatch is impossible here")
}

/// Measures, per seed and per key-set size, the mean softmax attention
/// entropy of random unit-gaussian queries against random unit-gaussian
/// keys under the default inverse-sqrt scale and the length-adaptive scale.
/// Returns one inner vector per seed, ordered by `cfg.lengths`.
pub fn entropy_by_length(cfg: &EntropyConfig) -> Result<Vec<Vec<EntropyPoint>>> {
    if cfg.d_h == 0 || cfg.rows == 0 || cfg.seeds.is_empty() || cfg.lengths.is_empty() {
        return Err(Error::config("entropy config: empty dimension, rows, seeds, or lengths"));
    }
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut rng = seeded_rng(seed);
        let mut per = Vec::with_capacity(cfg.lengths.len());
        for &n in &cfg.lengths {
            if n < 2 {
                return Err(Error::config("entropy config: each length must be >= 2"));
            }
            let q = gaussian(&[cfg.rows, cfg.d_h], &mut rng);
            let k = gaussian(&[n, cfg.d_h], &mut rng);
            let scores = matmul_plain(&q, &k, false, true)?;
            let default_scale = AttentionScaling::Default.resolve(n, cfg.d_h)?;
            let adaptive_scale = aas_scale(n, cfg.d_h, cfg.n_bar)?;
            per.push(EntropyPoint {
                n,
                default_entropy: mean_entropy(&scores, default_scale)?,
                adaptive_entropy: mean_entropy(&scores, adaptive_scale)?,
                default_scale,
                adaptive_scale,
            });
        }
        out.push(per);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite-difference battery
// ---------------------------------------------------------------------------

/// One kernel's worst finite-difference result over the battery seeds.
#[derive(Debug, Clone)]
pub struct BatteryResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>>;

/// Probe-weighted scalar readout: `sum(node * probe)`. A fixed random probe
/// makes the check sensitive to permutation and scaling bugs that a plain
/// sum would cancel out.
fn probed(tape: &mut Tape<f64>, node: NodeId, probe: &Tensor<f64>) -> Result<NodeId> {
    let p = tape.constant(probe.clone());
    let m = mul(tape, node, p)?;
    sum_all(tape, m)
}

fn battery_item<S>(
    out: &mut Vec<BatteryResult>,
    seeds: &[u64],
    name: &str,
    setup: S,
) -> Result<()>
where
    S: Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<BuildFn>,
{
    let salt = name
        .bytes()
        .fold(0xB177_E52Eu64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for &seed in seeds {
        let mut rng = seeded_rng(seed ^ salt);
        let mut store = ParamStore::new();
        let build = setup(&mut store, &mut rng)?;
        let report = check_gradient(&mut store, |t, s| build(t, s), 1e-5, 3, seed)?;
        worst = worst.max(report.max_rel_err);
        coords += report.coords_checked;
    }
    out.push(BatteryResult { name: name.into(), max_rel_err: worst, coords_checked: coords });
    Ok(())
}

fn uni(st: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<crate::tape::ParamId> {
    st.add(name, Tensor::uniform(shape, -1.0, 1.0, rng), true)
}

/// Central-difference gradient checks, at 64-bit precision, for every
/// differentiable kernel and for the transformer block in both layer-norm
/// placements (plus the linear-attention block used by the view extractor).
/// Returns per-kernel worst relative errors across all seeds.
pub fn gradcheck_battery(seeds: &[u64]) -> Result<Vec<BatteryResult>> {
    if seeds.is_empty() {
        return Err(Error::invalid("gradcheck_battery", "need at least one seed"));
    }
    let mut out = Vec::new();
    let s = seeds;

    battery_item(&mut out, s, "add", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let b = uni(st, "b", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = add(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "sub", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let b = uni(st, "b", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = sub(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "mul", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let b = uni(st, "b", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = mul(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "scale", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = scale(t, x, 1.37)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "add_scalar", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = add_scalar(t, x, -0.45)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "mul_const", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let k = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = mul_const(t, x, &k)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "add_const", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let k = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = add_const(t, x, &k)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "reshape", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[2, 6], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = reshape(t, x, &[2, 6])?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "gelu", |st, rng| {
        let a = st.add("a", Tensor::uniform(&[3, 4], -2.0, 2.0, rng), true)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = gelu(t, x)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "elu_feature_map", |st, rng| {
        let a = st.add("a", Tensor::uniform(&[3, 4], -2.0, 2.0, rng), true)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = elu_feature_map(t, x)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "softmax_scaled", |st, rng| {
        let a = st.add("a", Tensor::uniform(&[3, 5], -2.0, 2.0, rng), true)?;
        let probe = Tensor::uniform(&[3, 5], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = softmax_scaled(t, x, 0.7)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "layer_norm", |st, rng| {
        let a = uni(st, "a", &[4, 6], rng)?;
        let g = st.add("g", Tensor::uniform(&[6], 0.5, 1.5, rng), true)?;
        let b = uni(st, "b", &[6], rng)?;
        let probe = Tensor::uniform(&[4, 6], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let gn = t.param(sp, g);
            let bn = t.param(sp, b);
            let z = layer_norm(t, x, gn, bn, 1e-5)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "cross_entropy_depth", |st, rng| {
        let a = st.add("a", Tensor::uniform(&[4, 2, 3], -2.0, 2.0, rng), true)?;
        let targets = vec![0i32, 2, -1, 3, 1, 0];
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            cross_entropy_depth(t, x, &targets)
        }))
    })?;

    battery_item(&mut out, s, "matmul", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let b = uni(st, "b", &[4, 5], rng)?;
        let probe = Tensor::uniform(&[3, 5], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = matmul(t, x, y, false, false)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "matmul_transposed", |st, rng| {
        let a = uni(st, "a", &[4, 3], rng)?;
        let b = uni(st, "b", &[5, 4], rng)?;
        let probe = Tensor::uniform(&[3, 5], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = matmul(t, x, y, true, true)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "add_bias", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let b = uni(st, "b", &[4], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = add_bias(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "mul_channel", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let c = st.add("c", Tensor::uniform(&[4], 0.5, 1.5, rng), true)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, c);
            let z = mul_channel(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "transpose2d", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[4, 3], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = transpose2d(t, x)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "slice_cols", |st, rng| {
        let a = uni(st, "a", &[3, 6], rng)?;
        let probe = Tensor::uniform(&[3, 3], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = slice_cols(t, x, 1, 3)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "concat_cols", |st, rng| {
        let a = uni(st, "a", &[3, 2], rng)?;
        let b = uni(st, "b", &[3, 3], rng)?;
        let c = uni(st, "c", &[3, 1], rng)?;
        let probe = Tensor::uniform(&[3, 6], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = t.param(sp, c);
            let cat = concat_cols(t, &[x, y, z])?;
            probed(t, cat, &probe)
        }))
    })?;

    battery_item(&mut out, s, "div_by_col", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let d = st.add("d", Tensor::uniform(&[3, 1], 0.5, 1.5, rng), true)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, d);
            let z = div_by_col(t, x, y)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "sum_all", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            sum_all(t, x)
        }))
    })?;

    battery_item(&mut out, s, "mean_all", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            mean_all(t, x)
        }))
    })?;

    battery_item(&mut out, s, "sum_axis0", |st, rng| {
        let a = uni(st, "a", &[3, 4], rng)?;
        let probe = Tensor::uniform(&[4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = sum_axis0(t, x)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "bilinear_sample", |st, rng| {
        let a = uni(st, "src", &[2, 5, 6], rng)?;
        let mut cdata = Vec::with_capacity(2 * 3 * 4);
        for _ in 0..12 {
            cdata.push(rng.gen_range(0.3..4.7)); // x within [0, 5]
        }
        for _ in 0..12 {
            cdata.push(rng.gen_range(0.3..3.7)); // y within [0, 4]
        }
        let coords = Tensor::new(&[2, 3, 4], cdata)?;
        let probe = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let c = t.constant(coords.clone());
            let (z, _mask) = bilinear_sample(t, x, c)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "upsample2x_nearest", |st, rng| {
        let a = uni(st, "a", &[2, 3, 4], rng)?;
        let probe = Tensor::uniform(&[2, 6, 8], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let z = upsample2x_nearest(t, x)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "conv2d_stride1", |st, rng| {
        let x = uni(st, "x", &[2, 5, 6], rng)?;
        let w = uni(st, "w", &[3, 2, 3, 3], rng)?;
        let b = uni(st, "b", &[3], rng)?;
        let probe = Tensor::uniform(&[3, 5, 6], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let xn = t.param(sp, x);
            let wn = t.param(sp, w);
            let bn = t.param(sp, b);
            let z = conv2d(t, xn, wn, bn, 1, 1)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "conv2d_stride2", |st, rng| {
        let x = uni(st, "x", &[2, 6, 6], rng)?;
        let w = uni(st, "w", &[3, 2, 3, 3], rng)?;
        let b = uni(st, "b", &[3], rng)?;
        let probe = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let xn = t.param(sp, x);
            let wn = t.param(sp, w);
            let bn = t.param(sp, b);
            let z = conv2d(t, xn, wn, bn, 2, 1)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "conv3d", |st, rng| {
        let x = uni(st, "x", &[2, 3, 4, 4], rng)?;
        let w = uni(st, "w", &[2, 2, 3, 3, 3], rng)?;
        let b = uni(st, "b", &[2], rng)?;
        let probe = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let xn = t.param(sp, x);
            let wn = t.param(sp, w);
            let bn = t.param(sp, b);
            let z = conv3d(t, xn, wn, bn, 1, 1)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "patchify3d", |st, rng| {
        let x = uni(st, "x", &[2, 2, 4, 4], rng)?;
        let w = uni(st, "w", &[3, 16], rng)?;
        let b = uni(st, "b", &[3], rng)?;
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let xn = t.param(sp, x);
            let wn = t.param(sp, w);
            let bn = t.param(sp, b);
            let z = patchify3d(t, xn, wn, bn, (2, 2, 2))?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "unpatchify3d", |st, rng| {
        let x = uni(st, "x", &[3, 1, 2, 2], rng)?;
        let w = uni(st, "w", &[3, 8], rng)?;
        let b = uni(st, "b", &[1], rng)?;
        let probe = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let xn = t.param(sp, x);
            let wn = t.param(sp, w);
            let bn = t.param(sp, b);
            let z = unpatchify3d(t, xn, wn, bn, (2, 2, 2))?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "group_correlate", |st, rng| {
        let a = uni(st, "ref", &[4, 3, 3], rng)?;
        let b = uni(st, "src", &[4, 3, 3], rng)?;
        let probe = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = group_correlate(t, x, y, 2)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "stack_depth", |st, rng| {
        let a = uni(st, "a", &[2, 3, 3], rng)?;
        let b = uni(st, "b", &[2, 3, 3], rng)?;
        let c = uni(st, "c", &[2, 3, 3], rng)?;
        let probe = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let x = t.param(sp, a);
            let y = t.param(sp, b);
            let z = t.param(sp, c);
            let v = stack_depth(t, &[x, y, z])?;
            probed(t, v, &probe)
        }))
    })?;

    battery_item(&mut out, s, "vanilla_attention", |st, rng| {
        let q = uni(st, "q", &[5, 4], rng)?;
        let k = uni(st, "k", &[5, 4], rng)?;
        let v = uni(st, "v", &[5, 4], rng)?;
        let probe = Tensor::uniform(&[5, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let qn = t.param(sp, q);
            let kn = t.param(sp, k);
            let vn = t.param(sp, v);
            let z = vanilla_attention(t, qn, kn, vn, 0.6)?;
            probed(t, z, &probe)
        }))
    })?;

    battery_item(&mut out, s, "linear_attention", |st, rng| {
        let q = uni(st, "q", &[5, 4], rng)?;
        let k = uni(st, "k", &[5, 4], rng)?;
        let v = uni(st, "v", &[5, 4], rng)?;
        let probe = Tensor::uniform(&[5, 4], -1.0, 1.0, rng);
        Ok(Box::new(move |t, sp| {
            let qn = t.param(sp, q);
            let kn = t.param(sp, k);
            let vn = t.param(sp, v);
            let z = linear_attention(t, qn, kn, vn)?;
            probed(t, z, &probe)
        }))
    })?;

    for (name, placement, kind) in [
        ("block_pre_ln", LnPlacement::Pre, AttentionKind::Vanilla),
        ("block_post_ln", LnPlacement::Post, AttentionKind::Vanilla),
        ("block_pre_ln_linear", LnPlacement::Pre, AttentionKind::Linear),
    ] {
        battery_item(&mut out, s, name, |st, rng| {
            let cfg = BlockConfig {
                d_model: 8,
                expansion: 2,
                placement,
                attention: AttentionConfig {
                    d_model: 8,
                    heads: 2,
                    kind,
                    scaling: AttentionScaling::Default,
                },
            };
            let params = TransformerBlockParams::new(st, "blk", &cfg, rng)?;
            let x = st.add("x", Tensor::uniform(&[6, 8], -1.0, 1.0, rng), true)?;
            let probe = Tensor::uniform(&[6, 8], -1.0, 1.0, rng);
            Ok(Box::new(move |t, sp| {
                let xn = t.param(sp, x);
                let z = transformer_block(t, sp, &params, &cfg, xn, None)?;
                probed(t, z, &probe)
            }))
        })?;
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_mean_cost_averages_groups() {
        let cost = Tensor::new(
            &[2, 1, 1, 2],
            vec![1.0, 3.0, 5.0, 7.0],
        )
        .unwrap();
        let m = group_mean_cost(&cost).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2]);
        assert_eq!(m.data(), &[3.0, 5.0]);
        assert!(group_mean_cost(&Tensor::<f64>::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn bit_equality_distinguishes_signed_zero() {
        let a = Tensor::new(&[2], vec![0.0f64, 1.0]).unwrap();
        let b = Tensor::new(&[2], vec![-0.0f64, 1.0]).unwrap();
        assert!(tensors_bit_equal(&a, &a.clone()));
        assert!(!tensors_bit_equal(&a, &b));
    }

    #[test]
    fn wta_probe_runs_on_a_small_scene_set() {
        let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
        let rep = wta_oracle_check(900, 2, &cfg, 16, 8).unwrap();
        assert_eq!(rep.scenes, 2);
        assert!(rep.pixels > 0);
        assert!(rep.agreement > 0.8, "tiny-probe agreement {}", rep.agreement);
    }

    #[test]
    fn tiny_training_run_produces_finite_curve_and_eval() {
        let cfg = TrainConfig {
            scene: SceneConfig { height: 32, width: 32, views: 2, ..SceneConfig::default() },
            train_scenes: 2,
            val_scenes: 1,
            steps: 3,
            log_every: 1,
            ..TrainConfig::default()
        };
        let trained = train_pipeline(&cfg).unwrap();
        assert_eq!(trained.report.loss_curve.len(), 3);
        assert!(trained.report.loss_curve.iter().all(|&(_, l)| l.is_finite()));
        assert_eq!(trained.report.eval.error_ratios.len(), 3);
        // Exceed fractions over nested thresholds are monotone non-increasing.
        let e = &trained.report.eval.error_ratios;
        assert!(e[0] >= e[1] && e[1] >= e[2]);
        assert!(trained.report.eval.pixels > 0);
    }

    #[test]
    fn extrapolation_race_runs_at_toy_size() {
        let cfg = ExtrapolationConfig {
            seeds: vec![5],
            train_scenes: 2,
            eval_scenes: 1,
            steps: 2,
            train_size: (64, 64),
            eval_size: (96, 96),
            ..ExtrapolationConfig::default()
        };
        let outs = cvt_extrapolation_race(&cfg).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].train_tokens, 8 * 2 * 2);
        assert_eq!(outs[0].eval_tokens, 8 * 3 * 3);
        assert!(outs[0].e4_adaptive.is_finite() && outs[0].e4_default.is_finite());
    }

    #[test]
    fn ln_race_runs_and_reports_both_variants() {
        let cfg = LnRaceConfig {
            seeds: vec![3],
            steps: 5,
            blocks: 2,
            d_model: 8,
            heads: 2,
            tokens: 4,
            ..LnRaceConfig::default()
        };
        let outs = ln_placement_race(&cfg).unwrap();
        assert_eq!(outs.len(), 1);
        assert!(outs[0].pre_loss.is_finite());
        assert!(outs[0].post_loss.is_finite());
    }

    #[test]
    fn entropy_sweep_matches_default_scale_at_anchor_length() {
        let cfg = EntropyConfig {
            d_h: 16,
            lengths: vec![64, 256],
            n_bar: 64,
            rows: 8,
            seeds: vec![1, 2],
        };
        let rows = entropy_by_length(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for per in &rows {
            assert_eq!(per.len(), 2);
            // At n = n̄ the adaptive scale coincides with 1/√d, so both
            // entropies are the exact same number.
            assert_eq!(per[0].default_scale, per[0].adaptive_scale);
            assert_eq!(per[0].default_entropy, per[0].adaptive_entropy);
            // Longer key sets diffuse the default-scaled softmax.
            assert!(per[1].default_entropy > per[0].default_entropy);
            // The adaptive scale sharpens relative to the default at n > n̄.
            assert!(per[1].adaptive_scale > per[1].default_scale);
            assert!(per[1].adaptive_entropy < per[1].default_entropy);
        }
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = seeded_rng(77);
        let g = gaussian(&[4096], &mut rng);
        let mean = g.data().iter().sum::<f64>() / 4096.0;
        let var = g.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4096.0;
        assert!(mean.abs() < 0.08, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn battery_passes_on_one_seed() {
        let results = gradcheck_battery(&[41]).unwrap();
        assert!(results.len() >= 30);
        for r in &results {
            assert!(
                r.max_rel_err < 1e-6,
                "kernel {} rel err {}",
                r.name,
                r.max_rel_err
            );
            assert!(r.coords_checked > 0);
        }
    }
}
