//! Group-wise matching cost volumes: every source view is warped onto the
//! reference grid at each depth hypothesis, correlated group-by-group with
//! the reference features, and the per-view scores are averaged with
//! in-bounds mask weights.

use crate::error::{Error, Result};
use crate::geometry::{depthmap_warp, depthmap_warp_plain, homography_warp, homography_warp_plain, Camera};
use crate::ops::{
    add, group_correlate, group_correlate_plain, mul_const, stack_depth, stack_depth_plain,
};
use crate::pipeline::depth::HypothesisVolume;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// A matching cost volume on the recording tape.
#[derive(Debug)]
pub struct CostVolume {
    /// Group scores `[G, D, H, W]`.
    pub scores: NodeId,
    /// `[D, H, W]`, 1 where at least one source view was in bounds.
    pub valid: Tensor<f64>,
    /// The hypothesis ladder the volume sweeps.
    pub hypotheses: HypothesisVolume,
}

/// A matching cost volume computed without recording.
#[derive(Debug)]
pub struct CostVolumePlain<T: Real> {
    /// Group scores `[G, D, H, W]`.
    pub scores: Tensor<T>,
    /// `[D, H, W]`, 1 where at least one source view was in bounds.
    pub valid: Tensor<f64>,
    /// The hypothesis ladder the volume sweeps.
    pub hypotheses: HypothesisVolume,
}

/// Per-pixel supervision mask derived from a `[D, H, W]` validity volume:
/// 1 only where every hypothesis was scored by at least one source view, so
/// comparisons across the whole ladder are meaningful.
pub fn fully_swept_mask(valid: &Tensor<f64>) -> Result<Tensor<f64>> {
    if valid.rank() != 3 {
        return Err(Error::shape(
            "fully_swept_mask",
            format!("expected [D,H,W] validity, got {:?}", valid.shape()),
        ));
    }
    let (d, h, w) = (valid.shape()[0], valid.shape()[1], valid.shape()[2]);
    let hw = h * w;
    let mut out = vec![1.0f64; hw];
    for k in 0..d {
        for p in 0..hw {
            if valid.data()[k * hw + p] <= 0.5 {
                out[p] = 0.0;
            }
        }
    }
    Tensor::new(&[h, w], out)
}

fn check_inputs<T: Real>(
    shapes: &[&[usize]],
    cameras: &[Camera],
    vol: &HypothesisVolume,
    groups: usize,
) -> Result<(usize, usize, usize)> {
    let n_src = shapes.len() - 1;
    if n_src == 0 {
        return Err(Error::invalid("build_cost_volume", "need at least one source view"));
    }
    if cameras.len() != shapes.len() {
        return Err(Error::shape(
            "build_cost_volume",
            format!("{} cameras for {} views", cameras.len(), shapes.len()),
        ));
    }
    let ref_shape = shapes[0];
    if ref_shape.len() != 3 {
        return Err(Error::shape(
            "build_cost_volume",
            format!("expected [C,H,W] features, got {ref_shape:?}"),
        ));
    }
    for (i, s) in shapes.iter().enumerate() {
        if *s != ref_shape {
            return Err(Error::shape(
                "build_cost_volume",
                format!("view {i} features {s:?} differ from reference {ref_shape:?}"),
            ));
        }
    }
    let (c, h, w) = (ref_shape[0], ref_shape[1], ref_shape[2]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "group count {groups} must divide feature channels {c}"
        )));
    }
    if vol.height() != h || vol.width() != w {
        return Err(Error::shape(
            "build_cost_volume",
            format!(
                "hypothesis grid {}x{} does not match feature grid {h}x{w}",
                vol.height(),
                vol.width()
            ),
        ));
    }
    let _ = T::zero();
    Ok((c, h, w))
}

/// Mask-weighted view-average factors for one hypothesis: `m_v / Σ_v m_v`
/// where the sum is positive, else 0. Returns one `[H, W]` factor map per
/// view plus the ≥1-view validity map.
fn view_factors<T: Real>(masks: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, Tensor<f64>)> {
    let hw = masks[0].numel();
    let mut wsum = vec![T::zero(); hw];
    for m in masks {
        for (s, &v) in wsum.iter_mut().zip(m.data()) {
            *s = *s + v;
        }
    }
    let mut factors = Vec::with_capacity(masks.len());
    for m in masks {
        let mut f = vec![T::zero(); hw];
        for p in 0..hw {
            if wsum[p] > T::zero() {
                f[p] = m.data()[p] / wsum[p];
            }
        }
        factors.push(Tensor::new(masks[0].shape(), f)?);
    }
    let valid: Vec<f64> =
        wsum.iter().map(|&s| if s > T::zero() { 1.0 } else { 0.0 }).collect();
    Ok((factors, Tensor::new(masks[0].shape(), valid)?))
}

/// Tiles an `[H, W]` factor map across `groups` channels.
fn tile_groups<T: Real>(factor: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (h, w) = (factor.shape()[0], factor.shape()[1]);
    let hw = h * w;
    let mut data = vec![T::zero(); groups * hw];
    for g in 0..groups {
        data[g * hw..(g + 1) * hw].copy_from_slice(factor.data());
    }
    Tensor::new(&[groups, h, w], data)
}

/// Builds the group-wise cost volume on the tape.
///
/// `cameras[0]` is the reference view, `cameras[1..]` correspond to
/// `src_feats`; intrinsics must already be scaled to the feature grid. The
/// coarsest stage sweeps fronto-parallel planes (plane-induced homographies);
/// refinement stages warp through each pixel's own hypothesis depth.
/// Gradients flow into the reference and source features; the warp geometry
/// and mask weights are constants.
pub fn build_cost_volume<T: Real>(
    tape: &mut Tape<T>,
    ref_feat: NodeId,
    src_feats: &[NodeId],
    cameras: &[Camera],
    vol: &HypothesisVolume,
    groups: usize,
) -> Result<CostVolume> {
    let shapes: Vec<Vec<usize>> = std::iter::once(ref_feat)
        .chain(src_feats.iter().copied())
        .map(|n| tape.value(n).shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let (_, h, w) = check_inputs::<T>(&shape_refs, cameras, vol, groups)?;
    let d = vol.count();
    let hw = h * w;

    let mut slice_nodes = Vec::with_capacity(d);
    let mut valid = vec![0.0f64; d * hw];
    for k in 0..d {
        let mut warped = Vec::with_capacity(src_feats.len());
        let mut masks = Vec::with_capacity(src_feats.len());
        for (v, &src) in src_feats.iter().enumerate() {
            let (node, mask) = if vol.stage == 0 {
                let depth = vol.constant_depth(k)?.ok_or_else(|| {
                    Error::invalid(
                        "build_cost_volume",
                        "coarsest-stage hypotheses must be fronto-parallel planes",
                    )
                })?;
                homography_warp(tape, src, &cameras[0], &cameras[v + 1], depth)?
            } else {
                depthmap_warp(tape, src, &cameras[0], &cameras[v + 1], vol.slice(k)?)?
            };
            warped.push(node);
            masks.push(mask);
        }
        let (factors, slice_valid) = view_factors(&masks)?;
        valid[k * hw..(k + 1) * hw].copy_from_slice(slice_valid.data());

        let mut acc: Option<NodeId> = None;
        for (wn, f) in warped.iter().zip(factors.iter()) {
            let corr = group_correlate(tape, ref_feat, *wn, groups)?;
            let weighted = mul_const(tape, corr, &tile_groups(f, groups)?)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => add(tape, a, weighted)?,
            });
        }
        slice_nodes.push(acc.expect("at least one source view"));
    }
    let scores = stack_depth(tape, &slice_nodes)?;
    Ok(CostVolume {
        scores,
        valid: Tensor::new(&[d, h, w], valid)?,
        hypotheses: vol.clone(),
    })
}

/// Non-recording forward of [`build_cost_volume`]; identical arithmetic.
pub fn build_cost_volume_plain<T: Real>(
    ref_feat: &Tensor<T>,
    src_feats: &[&Tensor<T>],
    cameras: &[Camera],
    vol: &HypothesisVolume,
    groups: usize,
) -> Result<CostVolumePlain<T>> {
    let shapes: Vec<&[usize]> = std::iter::once(ref_feat.shape())
        .chain(src_feats.iter().map(|t| t.shape()))
        .collect();
    let (_, h, w) = check_inputs::<T>(&shapes, cameras, vol, groups)?;
    let d = vol.count();
    let hw = h * w;

    let mut slices = Vec::with_capacity(d);
    let mut valid = vec![0.0f64; d * hw];
    for k in 0..d {
        let mut warped = Vec::with_capacity(src_feats.len());
        let mut masks = Vec::with_capacity(src_feats.len());
        for (v, src) in src_feats.iter().enumerate() {
            let (wv, mask) = if vol.stage == 0 {
                let depth = vol.constant_depth(k)?.ok_or_else(|| {
                    Error::invalid(
                        "build_cost_volume",
                        "coarsest-stage hypotheses must be fronto-parallel planes",
                    )
                })?;
                homography_warp_plain(src, &cameras[0], &cameras[v + 1], depth)?
            } else {
                depthmap_warp_plain(src, &cameras[0], &cameras[v + 1], vol.slice(k)?)?
            };
            warped.push(wv);
            masks.push(mask);
        }
        let (factors, slice_valid) = view_factors(&masks)?;
        valid[k * hw..(k + 1) * hw].copy_from_slice(slice_valid.data());

        let mut acc: Option<Tensor<T>> = None;
        for (wv, f) in warped.iter().zip(factors.iter()) {
            let corr = group_correlate_plain(ref_feat, wv, groups)?;
            let weighted = corr.zip_map(&tile_groups(f, groups)?, "mul", |a, b| a * b)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => a.zip_map(&weighted, "add", |x, y| x + y)?,
            });
        }
        slices.push(acc.expect("at least one source view"));
    }
    Ok(CostVolumePlain {
        scores: stack_depth_plain(&slices)?,
        valid: Tensor::new(&[d, h, w], valid)?,
        hypotheses: vol.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{inverse_depth_hypotheses, look_at_camera};
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn identity_camera() -> Camera {
        Camera::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
            400.0,
            1000.0,
        )
        .unwrap()
    }

    fn arc_cameras(n: usize) -> Vec<Camera> {
        let target = [0.0, 0.0, 700.0];
        (0..n)
            .map(|i| {
                let angle = (i as f64 - (n as f64 - 1.0) / 2.0) * 8.0f64.to_radians();
                let pos = [700.0 * angle.sin(), 0.0, 700.0 - 700.0 * angle.cos()];
                look_at_camera(pos, target, [0.0, 1.0, 0.0], 60.0, 60.0, 7.5, 5.5, 400.0, 1000.0)
                    .unwrap()
            })
            .collect()
    }

    fn broadcast_vol(d: usize, h: usize, w: usize) -> HypothesisVolume {
        let hyps = inverse_depth_hypotheses(400.0, 1000.0, d, 0, None, None).unwrap();
        HypothesisVolume::broadcast(&hyps, h, w).unwrap()
    }

    #[test]
    fn identical_view_scores_group_self_similarity() {
        let mut rng = seeded_rng(61);
        let (c, h, w, g) = (8usize, 5usize, 6usize, 4usize);
        let feat = Tensor::<f64>::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let cam = identity_camera();
        let vol = broadcast_vol(3, h, w);
        let out =
            build_cost_volume_plain(&feat, &[&feat], &[cam.clone(), cam], &vol, g).unwrap();
        assert_eq!(out.scores.shape(), &[g, 3, h, w]);
        let per = c / g;
        let hw = h * w;
        for gi in 0..g {
            for k in 0..3 {
                for p in 0..hw {
                    let mut want = 0.0;
                    for ch in 0..per {
                        let v = feat.data()[(gi * per + ch) * hw + p];
                        want += v * v;
                    }
                    want *= g as f64 / c as f64;
                    let got = out.scores.data()[(gi * 3 + k) * hw + p];
                    assert!(
                        (got - want).abs() < 1e-9,
                        "group {gi} hyp {k} pixel {p}: {got} vs {want}"
                    );
                }
            }
        }
        for &m in out.valid.data() {
            assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn zero_source_features_give_zero_scores() {
        let mut rng = seeded_rng(62);
        let cams = arc_cameras(2);
        let (h, w) = (6, 8);
        let ref_feat = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let zeros = Tensor::<f64>::zeros(&[4, h, w]);
        let vol = broadcast_vol(4, h, w);
        let out = build_cost_volume_plain(&ref_feat, &[&zeros], &cams, &vol, 2).unwrap();
        for &s in out.scores.data() {
            assert_eq!(s, 0.0);
        }
        // The mask still reflects warp bounds, not the feature content.
        let any_valid = out.valid.data().iter().any(|&m| m == 1.0);
        let any_invalid = out.valid.data().iter().any(|&m| m == 0.0);
        assert!(any_valid);
        assert!(any_invalid, "an 8-degree arc should push some border pixels out of bounds");
    }

    #[test]
    fn feature_scaling_is_quadratic() {
        let mut rng = seeded_rng(63);
        let cams = arc_cameras(2);
        let (h, w) = (5, 7);
        let ref_feat = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let src = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let vol = broadcast_vol(3, h, w);
        let base = build_cost_volume_plain(&ref_feat, &[&src], &cams, &vol, 2).unwrap();
        let ref3 = ref_feat.map(|v| v * 3.0);
        let src3 = src.map(|v| v * 3.0);
        let scaled = build_cost_volume_plain(&ref3, &[&src3], &cams, &vol, 2).unwrap();
        for (a, b) in base.scores.data().iter().zip(scaled.scores.data()) {
            assert!((b - 9.0 * a).abs() < 1e-9, "{b} vs 9*{a}");
        }
    }

    #[test]
    fn single_visible_view_takes_full_weight() {
        let mut rng = seeded_rng(64);
        let cams = arc_cameras(3);
        let (h, w) = (6, 8);
        let ref_feat = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let src_a = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let src_b = Tensor::<f64>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let vol = broadcast_vol(2, h, w);
        let both = build_cost_volume_plain(&ref_feat, &[&src_a, &src_b], &cams, &vol, 2).unwrap();
        let only_a = build_cost_volume_plain(
            &ref_feat,
            &[&src_a],
            &[cams[0].clone(), cams[1].clone()],
            &vol,
            2,
        )
        .unwrap();
        // Wherever view B is out of bounds but view A is in, the two-view
        // volume must equal the single-view volume.
        let hw = h * w;
        let mut compared = 0;
        for k in 0..2 {
            let depth = vol.constant_depth(k).unwrap().unwrap();
            let (_, mask_a) =
                homography_warp_plain(&src_a, &cams[0], &cams[1], depth).unwrap();
            let (_, mask_b) =
                homography_warp_plain(&src_b, &cams[0], &cams[2], depth).unwrap();
            for p in 0..hw {
                if mask_a.data()[p] == 1.0 && mask_b.data()[p] == 0.0 {
                    for g in 0..2 {
                        let a = both.scores.data()[(g * 2 + k) * hw + p];
                        let b = only_a.scores.data()[(g * 2 + k) * hw + p];
                        assert!((a - b).abs() < 1e-12, "hyp {k} pixel {p}: {a} vs {b}");
                    }
                    compared += 1;
                }
            }
        }
        assert!(compared > 0, "expected some pixels visible in only one view");
    }

    #[test]
    fn tape_matches_plain_bitwise_for_both_stage_kinds() {
        let mut rng = seeded_rng(65);
        let cams = arc_cameras(3);
        let (h, w) = (6, 8);
        let ref_feat = Tensor::<f32>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let src_a = Tensor::<f32>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let src_b = Tensor::<f32>::uniform(&[4, h, w], -1.0, 1.0, &mut rng);

        let prev = Tensor::new(
            &[h, w],
            (0..h * w).map(|_| rng.gen_range(450.0..950.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let vols = [
            broadcast_vol(4, h, w),
            HypothesisVolume::refine(&prev, 400.0, 1000.0, 3, 1, 0.25).unwrap(),
        ];
        for vol in &vols {
            let plain =
                build_cost_volume_plain(&ref_feat, &[&src_a, &src_b], &cams, vol, 2).unwrap();
            let mut tape = Tape::<f32>::new();
            let rn = tape.leaf(ref_feat.clone());
            let an = tape.constant(src_a.clone());
            let bn = tape.constant(src_b.clone());
            let cv = build_cost_volume(&mut tape, rn, &[an, bn], &cams, vol, 2).unwrap();
            assert_eq!(tape.value(cv.scores).data(), plain.scores.data());
            assert_eq!(cv.valid.data(), plain.valid.data());
        }
    }

    #[test]
    fn refinement_volume_follows_per_pixel_depths() {
        // Two pixels with very different refinement centers must produce
        // different depths within the same hypothesis slice.
        let (h, w) = (6, 8);
        let mut prev = Tensor::<f64>::full(&[h, w], 500.0);
        prev.data_mut()[0] = 950.0;
        let vol = HypothesisVolume::refine(&prev, 400.0, 1000.0, 3, 1, 0.2).unwrap();
        let s0 = vol.slice(0).unwrap();
        assert!((s0[0] - s0[1]).abs() > 100.0, "slice should vary per pixel");
        assert_eq!(vol.constant_depth(0).unwrap(), None);
    }

    #[test]
    fn input_validation_rejects_bad_configurations() {
        let mut rng = seeded_rng(66);
        let cams = arc_cameras(2);
        let feat = Tensor::<f64>::uniform(&[4, 5, 6], -1.0, 1.0, &mut rng);
        let vol = broadcast_vol(2, 5, 6);
        // No sources.
        assert!(build_cost_volume_plain::<f64>(&feat, &[], &cams[..1], &vol, 2).is_err());
        // Camera count mismatch.
        assert!(build_cost_volume_plain(&feat, &[&feat], &cams[..1], &vol, 2).is_err());
        // Groups must divide channels.
        assert!(build_cost_volume_plain(&feat, &[&feat], &cams, &vol, 3).is_err());
        // Feature shape mismatch.
        let other = Tensor::<f64>::uniform(&[4, 6, 6], -1.0, 1.0, &mut rng);
        assert!(build_cost_volume_plain(&feat, &[&other], &cams, &vol, 2).is_err());
        // Hypothesis grid mismatch.
        let wrong = broadcast_vol(2, 4, 6);
        assert!(build_cost_volume_plain(&feat, &[&feat], &cams, &wrong, 2).is_err());
    }

    #[test]
    fn fully_swept_mask_requires_every_hypothesis() {
        let valid = Tensor::new(
            &[2, 1, 3],
            vec![
                1.0, 1.0, 0.0, // hypothesis 0
                1.0, 0.0, 0.0, // hypothesis 1
            ],
        )
        .unwrap();
        let m = fully_swept_mask(&valid).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_flow_to_reference_and_sources() {
        let mut rng = seeded_rng(67);
        let cams = arc_cameras(2);
        let (h, w) = (5, 6);
        let ref_feat = Tensor::<f64>::uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let src = Tensor::<f64>::uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let vol = broadcast_vol(2, h, w);
        let mut store = crate::tape::ParamStore::<f64>::new();
        let rid = store.add("ref", ref_feat, true).unwrap();
        let sid = store.add("src", src, true).unwrap();
        let vol2 = vol.clone();
        let cams2 = cams.clone();
        let report = crate::gradcheck::check_gradient(
            &mut store,
            move |tape, store| {
                let rn = tape.param(store, rid);
                let sn = tape.param(store, sid);
                let cv = build_cost_volume(tape, rn, &[sn], &cams2, &vol2, 2)?;
                crate::ops::sum_all(tape, cv.scores)
            },
            crate::gradcheck::DEFAULT_STEP,
            16,
            68,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
