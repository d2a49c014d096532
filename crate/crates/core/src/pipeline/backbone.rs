//! The frozen convolutional backbone stub and the trainable feature
//! extractor that runs beside it.
//!
//! The stub stands in for a large pretrained encoder: a fixed-seed stack of
//! stride-2 convolutions down to 1/32 resolution with three successive "tap"
//! layers. Its weights live outside the parameter store, are regenerated
//! bit-identically from an internal seed, and never receive gradients — the
//! side-tuning contract. The feature extractor combines cross-view attention
//! over the taps, a small trainable image encoder, and a resolution-
//! normalized positional encoding into per-view matching features at 1/8
//! resolution.

use crate::blocks::{
    sva_block, sva_block_plain, AlsCoeffs, BlockConfig, LayerNormParams, LinearParams,
    SvaBlockParams, SvaTap,
};
use crate::attention::{AttentionConfig, AttentionKind, AttentionScaling};
use crate::encodings::normalized_pe_2d;
use crate::error::{Error, Result};
use crate::ops::{
    add_const, concat_cols, concat_cols_plain, conv2d, conv2d_plain, gelu, gelu_plain, reshape,
    transpose2d, transpose2d_plain, upsample2x_nearest, upsample2x_nearest_plain,
};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{seeded_rng, Real, Tensor};
use rand_chacha::ChaCha8Rng;

/// Channels of every backbone tap layer (and of the matching features).
pub const FEATURE_CHANNELS: usize = 32;
/// Number of tap layers the stub exposes.
pub const TAP_COUNT: usize = 3;
/// Cross-view block levels per resolution.
pub const SVA_LEVELS: usize = 2;
/// Attention heads of the cross-view blocks.
pub const SVA_HEADS: usize = 4;
/// Fixed seed the frozen stub regenerates its weights from.
const STUB_SEED: u64 = 0xF0_5EED;

/// Downsampling chain of the stub: five stride-2 convolutions, 1/32 overall.
const STUB_CHANNELS: [usize; 6] = [3, 8, 16, 32, FEATURE_CHANNELS, FEATURE_CHANNELS];

/// Frozen convolutional encoder producing [`TAP_COUNT`] feature layers at
/// 1/32 of the input resolution. Weights are plain tensors never registered
/// with any parameter store, so no training step can touch them; re-creating
/// the stub reproduces them bit-for-bit.
#[derive(Debug, Clone)]
pub struct BackboneStub<T: Real> {
    down: Vec<(Tensor<T>, Tensor<T>)>,
    taps: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> BackboneStub<T> {
    pub fn new() -> Self {
        let mut rng = seeded_rng(STUB_SEED);
        let mut down = Vec::with_capacity(STUB_CHANNELS.len() - 1);
        for win in STUB_CHANNELS.windows(2) {
            let (ci, co) = (win[0], win[1]);
            let bound = 1.0 / ((ci * 9) as f64).sqrt();
            down.push((
                Tensor::uniform(&[co, ci, 3, 3], -bound, bound, &mut rng),
                Tensor::zeros(&[co]),
            ));
        }
        let c = FEATURE_CHANNELS;
        let bound = 1.0 / ((c * 9) as f64).sqrt();
        let taps = (0..TAP_COUNT)
            .map(|_| {
                (
                    Tensor::uniform(&[c, c, 3, 3], -bound, bound, &mut rng),
                    Tensor::zeros(&[c]),
                )
            })
            .collect();
        Self { down, taps }
    }

    /// Every frozen tensor, for bit-identity audits.
    pub fn weights(&self) -> Vec<&Tensor<T>> {
        self.down
            .iter()
            .chain(self.taps.iter())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Runs the frozen stack: `[3, H, W]` (H, W divisible by 32) to
    /// [`TAP_COUNT`] layers of `[32, H/32, W/32]` features.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape(
                "backbone_stub",
                format!("expected [3,H,W] image, got {:?}", image.shape()),
            ));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "backbone_stub",
                format!("image {h}x{w} must be divisible by 32"),
            ));
        }
        let mut x = image.clone();
        for (wt, b) in &self.down {
            x = gelu_plain(&conv2d_plain(&x, wt, b, 2, 1)?);
        }
        let mut taps = Vec::with_capacity(TAP_COUNT);
        let mut cur = x;
        for (i, (wt, b)) in self.taps.iter().enumerate() {
            let inp = if i == 0 { cur.clone() } else { gelu_plain(&cur) };
            cur = conv2d_plain(&inp, wt, b, 1, 1)?;
            taps.push(cur.clone());
        }
        Ok(taps)
    }
}

impl<T: Real> Default for BackboneStub<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Trainable parameters of the per-view feature extractor.
#[derive(Debug, Clone)]
pub struct FeatureExtractorParams {
    /// Cross-view levels over the 1/32 tap sequences.
    pub sva_coarse: Vec<SvaBlockParams>,
    /// One layer norm per tap injection level.
    pub tap_lns: Vec<LayerNormParams>,
    /// Per-level channel gates on the injected taps.
    pub tap_als: AlsCoeffs,
    /// Image encoder: three stride-2 convolutions to 1/8.
    pub encoder: Vec<(ParamId, ParamId)>,
    /// Linear fusion of encoder and side-stream channels.
    pub fuse: LinearParams,
    /// Cross-view levels at 1/8 after the positional encoding.
    pub sva_fine: Vec<SvaBlockParams>,
    /// Shared transformer configuration of all cross-view blocks.
    pub cfg: BlockConfig,
    /// When false, the cross-view attention path (and with it the frozen
    /// backbone) is skipped entirely: features come from the image encoder
    /// plus positional encoding alone.
    pub use_sva: bool,
}

impl FeatureExtractorParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        use_sva: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = FEATURE_CHANNELS;
        let cfg = BlockConfig {
            d_model: c,
            expansion: 4,
            placement: crate::blocks::LnPlacement::Pre,
            attention: AttentionConfig {
                d_model: c,
                heads: SVA_HEADS,
                kind: AttentionKind::Linear,
                scaling: AttentionScaling::Default,
            },
        };
        cfg.validate()?;
        let mut sva_coarse = Vec::with_capacity(SVA_LEVELS);
        let mut tap_lns = Vec::with_capacity(SVA_LEVELS);
        for l in 0..SVA_LEVELS {
            sva_coarse.push(SvaBlockParams::new(store, &format!("{prefix}.coarse{l}"), &cfg, rng)?);
            tap_lns.push(LayerNormParams::new(store, &format!("{prefix}.tap_ln{l}"), c)?);
        }
        let tap_als = AlsCoeffs::new(store, &format!("{prefix}.tap_als"), SVA_LEVELS, c)?;
        let enc_channels = [3usize, 16, c, c];
        let mut encoder = Vec::with_capacity(3);
        for (i, win) in enc_channels.windows(2).enumerate() {
            let (ci, co) = (win[0], win[1]);
            encoder.push((
                store.add_uniform_init(
                    format!("{prefix}.enc{i}.w"),
                    &[co, ci, 3, 3],
                    ci * 9,
                    rng,
                )?,
                store.add(format!("{prefix}.enc{i}.b"), Tensor::zeros(&[co]), true)?,
            ));
        }
        let fuse = LinearParams::new(store, &format!("{prefix}.fuse"), 2 * c, c, rng)?;
        let mut sva_fine = Vec::with_capacity(SVA_LEVELS);
        for l in 0..SVA_LEVELS {
            sva_fine.push(SvaBlockParams::new(store, &format!("{prefix}.fine{l}"), &cfg, rng)?);
        }
        Ok(Self { sva_coarse, tap_lns, tap_als, encoder, fuse, sva_fine, cfg, use_sva })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.sva_coarse {
            ids.extend(b.param_ids());
        }
        for ln in &self.tap_lns {
            ids.push(ln.gamma);
            ids.push(ln.beta);
        }
        ids.extend(self.tap_als.scales.iter().copied());
        for (w, b) in &self.encoder {
            ids.push(*w);
            ids.push(*b);
        }
        ids.push(self.fuse.w);
        ids.push(self.fuse.b);
        for b in &self.sva_fine {
            ids.extend(b.param_ids());
        }
        ids
    }
}

/// `[C, h, w]` map to a `[h·w, C]` token sequence (plain).
fn map_to_seq_plain<T: Real>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    transpose2d_plain(&map.reshaped(&[c, h * w])?)
}

fn seq_to_map<T: Real>(tape: &mut Tape<T>, seq: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let c = tape.value(seq).shape()[1];
    let t = transpose2d(tape, seq)?;
    reshape(tape, t, &[c, h, w])
}

fn map_to_seq<T: Real>(tape: &mut Tape<T>, map: NodeId) -> Result<NodeId> {
    let shape = tape.value(map).shape().to_vec();
    let flat = reshape(tape, map, &[shape[0], shape[1] * shape[2]])?;
    transpose2d(tape, flat)
}

/// Per-view matching features `[32, H/8, W/8]` for `N ≥ 2` views (view 0 is
/// the reference). Images must be divisible by 32.
pub fn extract_features<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &FeatureExtractorParams,
    backbone: &BackboneStub<T>,
    images: &[Tensor<T>],
) -> Result<Vec<NodeId>> {
    let (h, w) = check_images(images)?;
    let (h8, w8) = (h / 8, w / 8);
    let n_views = images.len();

    // Trainable image encoder to 1/8 (all views).
    let mut enc_seqs = Vec::with_capacity(n_views);
    for img in images {
        let mut x = tape.constant(img.clone());
        for (i, (wid, bid)) in params.encoder.iter().enumerate() {
            let wn = tape.param(store, *wid);
            let bn = tape.param(store, *bid);
            x = conv2d(tape, x, wn, bn, 2, 1)?;
            if i + 1 < params.encoder.len() {
                x = gelu(tape, x)?;
            }
        }
        enc_seqs.push(map_to_seq(tape, x)?);
    }

    let pe = {
        let pe_map = normalized_pe_2d::<T>(h8, w8, FEATURE_CHANNELS)?;
        map_to_seq_plain(&pe_map)?
    };

    let mut streams: Vec<NodeId>;
    if params.use_sva {
        // Frozen taps at 1/32, as token sequences per view and tap level.
        let (h32, w32) = (h / 32, w / 32);
        let mut tap_seqs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(n_views);
        for img in images {
            let taps = backbone.forward(img)?;
            tap_seqs.push(
                taps.iter().map(|t| map_to_seq_plain(t)).collect::<Result<Vec<_>>>()?,
            );
        }
        // Side stream: start from tap 0, run the coarse cross-view levels
        // with taps 1.. injected after each level.
        let mut ref_x = tape.constant(tap_seqs[0][0].clone());
        let mut srcs: Vec<NodeId> =
            tap_seqs[1..].iter().map(|t| tape.constant(t[0].clone())).collect();
        for (l, block) in params.sva_coarse.iter().enumerate() {
            let tap_feats: Vec<Tensor<T>> =
                tap_seqs[1..].iter().map(|t| t[l + 1].clone()).collect();
            let tap = SvaTap {
                ref_feat: &tap_seqs[0][l + 1],
                src_feats: &tap_feats,
                layer: l,
                ln: &params.tap_lns[l],
                als: &params.tap_als,
            };
            let (r, s) = sva_block(tape, store, block, &params.cfg, ref_x, &srcs, Some(&tap))?;
            ref_x = r;
            srcs = s;
        }
        // Upsample the side stream to 1/8 and fuse with the image encoder.
        streams = Vec::with_capacity(n_views);
        for (v, seq) in std::iter::once(ref_x).chain(srcs).enumerate() {
            let map = seq_to_map(tape, seq, h32, w32)?;
            let up1 = upsample2x_nearest(tape, map)?;
            let up2 = upsample2x_nearest(tape, up1)?;
            let side_seq = map_to_seq(tape, up2)?;
            let cat = concat_cols(tape, &[enc_seqs[v], side_seq])?;
            let fused = params.fuse.forward(tape, store, cat)?;
            streams.push(add_const(tape, fused, &pe)?);
        }
        // Cross-view levels at 1/8.
        let mut ref_x = streams[0];
        let mut srcs = streams[1..].to_vec();
        for block in &params.sva_fine {
            let (r, s) = sva_block(tape, store, block, &params.cfg, ref_x, &srcs, None)?;
            ref_x = r;
            srcs = s;
        }
        streams = std::iter::once(ref_x).chain(srcs).collect();
    } else {
        streams = enc_seqs
            .iter()
            .map(|&s| add_const(tape, s, &pe))
            .collect::<Result<Vec<_>>>()?;
    }

    streams.into_iter().map(|s| seq_to_map(tape, s, h8, w8)).collect()
}

/// Non-recording forward of [`extract_features`]; identical arithmetic.
pub fn extract_features_plain<T: Real>(
    store: &ParamStore<T>,
    params: &FeatureExtractorParams,
    backbone: &BackboneStub<T>,
    images: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let (h, w) = check_images(images)?;
    let (h8, w8) = (h / 8, w / 8);
    let n_views = images.len();

    let mut enc_seqs = Vec::with_capacity(n_views);
    for img in images {
        let mut x = img.clone();
        for (i, (wid, bid)) in params.encoder.iter().enumerate() {
            x = conv2d_plain(&x, store.value(*wid), store.value(*bid), 2, 1)?;
            if i + 1 < params.encoder.len() {
                x = gelu_plain(&x);
            }
        }
        enc_seqs.push(map_to_seq_plain(&x)?);
    }

    let pe = map_to_seq_plain(&normalized_pe_2d::<T>(h8, w8, FEATURE_CHANNELS)?)?;

    let mut streams: Vec<Tensor<T>>;
    if params.use_sva {
        let (h32, w32) = (h / 32, w / 32);
        let mut tap_seqs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(n_views);
        for img in images {
            let taps = backbone.forward(img)?;
            tap_seqs.push(
                taps.iter().map(|t| map_to_seq_plain(t)).collect::<Result<Vec<_>>>()?,
            );
        }
        let mut ref_x = tap_seqs[0][0].clone();
        let mut srcs: Vec<Tensor<T>> = tap_seqs[1..].iter().map(|t| t[0].clone()).collect();
        for (l, block) in params.sva_coarse.iter().enumerate() {
            let tap_feats: Vec<Tensor<T>> =
                tap_seqs[1..].iter().map(|t| t[l + 1].clone()).collect();
            let tap = SvaTap {
                ref_feat: &tap_seqs[0][l + 1],
                src_feats: &tap_feats,
                layer: l,
                ln: &params.tap_lns[l],
                als: &params.tap_als,
            };
            let (r, s) = sva_block_plain(store, block, &params.cfg, &ref_x, &srcs, Some(&tap))?;
            ref_x = r;
            srcs = s;
        }
        streams = Vec::with_capacity(n_views);
        for (v, seq) in std::iter::once(&ref_x).chain(srcs.iter()).enumerate() {
            let c = seq.shape()[1];
            let map = transpose2d_plain(seq)?.reshaped(&[c, h32, w32])?;
            let up = upsample2x_nearest_plain(&upsample2x_nearest_plain(&map)?)?;
            let side_seq = map_to_seq_plain(&up)?;
            let cat = concat_cols_plain(&[&enc_seqs[v], &side_seq])?;
            let fused = params.fuse.forward_plain(store, &cat)?;
            streams.push(fused.zip_map(&pe, "add", |a, b| a + b)?);
        }
        let mut ref_x = streams[0].clone();
        let mut srcs = streams[1..].to_vec();
        for block in &params.sva_fine {
            let (r, s) = sva_block_plain(store, block, &params.cfg, &ref_x, &srcs, None)?;
            ref_x = r;
            srcs = s;
        }
        streams = std::iter::once(ref_x).chain(srcs).collect();
    } else {
        streams = enc_seqs
            .iter()
            .map(|s| s.zip_map(&pe, "add", |a, b| a + b))
            .collect::<Result<Vec<_>>>()?;
    }

    streams
        .into_iter()
        .map(|s| {
            let c = s.shape()[1];
            transpose2d_plain(&s)?.reshaped(&[c, h8, w8])
        })
        .collect()
}

fn check_images<T: Real>(images: &[Tensor<T>]) -> Result<(usize, usize)> {
    if images.len() < 2 {
        return Err(Error::invalid(
            "extract_features",
            format!("need a reference and at least one source view, got {}", images.len()),
        ));
    }
    let shape = images[0].shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "extract_features",
            format!("expected [3,H,W] images, got {shape:?}"),
        ));
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::shape(
                "extract_features",
                format!("view {i} shape {:?} differs from {shape:?}", img.shape()),
            ));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(
            "extract_features",
            format!("image {h}x{w} must be divisible by 32"),
        ));
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_across_instances() {
        let a = BackboneStub::<f32>::new();
        let b = BackboneStub::<f32>::new();
        for (wa, wb) in a.weights().iter().zip(b.weights().iter()) {
            assert_eq!(wa.data(), wb.data());
        }
        let mut rng = seeded_rng(71);
        let img = Tensor::<f32>::uniform(&[3, 64, 96], 0.0, 1.0, &mut rng);
        let ta = a.forward(&img).unwrap();
        let tb = b.forward(&img).unwrap();
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn stub_shapes_follow_one_thirtysecond_rule() {
        let stub = BackboneStub::<f64>::new();
        let mut rng = seeded_rng(72);
        let img = Tensor::<f64>::uniform(&[3, 64, 96], 0.0, 1.0, &mut rng);
        let taps = stub.forward(&img).unwrap();
        assert_eq!(taps.len(), TAP_COUNT);
        for t in &taps {
            assert_eq!(t.shape(), &[FEATURE_CHANNELS, 2, 3]);
            t.ensure_finite("tap").unwrap();
        }
        // Successive taps must differ (they come from different layers).
        assert!(taps[0].max_abs_diff(&taps[1]).unwrap() > 0.0);
        assert!(stub.forward(&Tensor::<f64>::zeros(&[3, 60, 96])).is_err());
    }

    #[test]
    fn extractor_produces_eighth_scale_features() {
        let mut rng = seeded_rng(73);
        let mut store = ParamStore::<f32>::new();
        let params = FeatureExtractorParams::new(&mut store, "feat", true, &mut rng).unwrap();
        let backbone = BackboneStub::<f32>::new();
        let images: Vec<Tensor<f32>> =
            (0..3).map(|_| Tensor::uniform(&[3, 64, 96], 0.0, 1.0, &mut rng)).collect();
        let feats = extract_features_plain(&store, &params, &backbone, &images).unwrap();
        assert_eq!(feats.len(), 3);
        for f in &feats {
            assert_eq!(f.shape(), &[FEATURE_CHANNELS, 8, 12]);
            f.ensure_finite("features").unwrap();
        }
        // Different views should produce different features.
        assert!(feats[0].max_abs_diff(&feats[1]).unwrap() > 1e-6);
    }

    #[test]
    fn extractor_tape_matches_plain_bitwise() {
        let mut rng = seeded_rng(74);
        let mut store = ParamStore::<f32>::new();
        for use_sva in [true, false] {
            let params =
                FeatureExtractorParams::new(&mut store, &format!("feat{use_sva}"), use_sva, &mut rng)
                    .unwrap();
            let backbone = BackboneStub::<f32>::new();
            let images: Vec<Tensor<f32>> =
                (0..2).map(|_| Tensor::uniform(&[3, 32, 64], 0.0, 1.0, &mut rng)).collect();
            let plain = extract_features_plain(&store, &params, &backbone, &images).unwrap();
            let mut tape = Tape::<f32>::new();
            let feats =
                extract_features(&mut tape, &store, &params, &backbone, &images).unwrap();
            for (node, want) in feats.iter().zip(plain.iter()) {
                assert_eq!(tape.value(*node).data(), want.data(), "use_sva={use_sva}");
            }
        }
    }

    #[test]
    fn sva_toggle_changes_features_and_dependency_on_backbone() {
        let mut rng = seeded_rng(75);
        let mut store = ParamStore::<f32>::new();
        let with = FeatureExtractorParams::new(&mut store, "feat", true, &mut rng).unwrap();
        let without = FeatureExtractorParams { use_sva: false, ..with.clone() };
        let backbone = BackboneStub::<f32>::new();
        let images: Vec<Tensor<f32>> =
            (0..2).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let a = extract_features_plain(&store, &with, &backbone, &images).unwrap();
        let b = extract_features_plain(&store, &without, &backbone, &images).unwrap();
        assert!(a[0].max_abs_diff(&b[0]).unwrap() > 1e-6);
    }

    #[test]
    fn no_gradient_reaches_frozen_weights_and_training_cannot_move_them() {
        // The frozen weights are not in the store at all: train every
        // extractor parameter and confirm a fresh stub still matches.
        let mut rng = seeded_rng(76);
        let mut store = ParamStore::<f64>::new();
        let params = FeatureExtractorParams::new(&mut store, "feat", true, &mut rng).unwrap();
        let backbone = BackboneStub::<f64>::new();
        let images: Vec<Tensor<f64>> =
            (0..2).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let snapshot: Vec<Tensor<f64>> =
            backbone.weights().iter().map(|t| (*t).clone()).collect();

        let mut tape = Tape::<f64>::new();
        let feats = extract_features(&mut tape, &store, &params, &backbone, &images).unwrap();
        let loss = crate::ops::sum_all(&mut tape, feats[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store).unwrap();
        // Crude gradient step on every trainable parameter.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.grad(id).clone();
            let v = store.value(id).zip_map(&g, "step", |a, b| a - 0.1 * b).unwrap();
            store.set_value(id, v).unwrap();
        }
        let fresh = BackboneStub::<f64>::new();
        for (now, before) in fresh.weights().iter().zip(snapshot.iter()) {
            assert_eq!(now.data(), before.data());
        }
        for (now, before) in backbone.weights().iter().zip(snapshot.iter()) {
            assert_eq!(now.data(), before.data());
        }
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let mut rng = seeded_rng(77);
        let mut store = ParamStore::<f64>::new();
        let params = FeatureExtractorParams::new(&mut store, "feat", true, &mut rng).unwrap();
        let backbone = BackboneStub::<f64>::new();
        let images: Vec<Tensor<f64>> =
            (0..2).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let probe = Tensor::<f64>::uniform(&[32, 4, 4], -1.0, 1.0, &mut rng);
        let report = crate::gradcheck::check_gradient(
            &mut store,
            move |tape, store| {
                let feats = extract_features(tape, store, &params, &backbone, &images)?;
                let weighted = crate::ops::mul_const(tape, feats[0], &probe)?;
                crate::ops::sum_all(tape, weighted)
            },
            crate::gradcheck::DEFAULT_STEP,
            3,
            78,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
