//! Positional encodings: the 1-D sinusoid primitive, a scale-normalized 2-D
//! encoding for image-plane attention, and a frustum-volume 3-D encoding for
//! cost-volume attention.
//!
//! Both composite encodings first map raw positions onto a fixed training
//! scale of `[0, 128]` per axis, so the encoding of a given *relative*
//! position is identical at every resolution.

use crate::error::{Error, Result};
use crate::geometry::{frustum_normalize, Camera};
use crate::ops::{add_bias, matmul, matmul_plain, transpose2d, transpose2d_plain};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Temperature base of the sinusoid frequency ladder.
pub const SINUSOID_BASE: f64 = 10000.0;

/// The per-axis training normalization scale: positions are mapped so the
/// largest position of an axis lands at 128.
pub const TRAINING_SCALE: f64 = 128.0;

/// Encodes scalar positions as interleaved sin/cos pairs: column `2i` holds
/// `sin(pos / base^{2i/C})`, column `2i+1` the matching cosine. Output is
/// `[n, c_axis]`.
pub fn sinusoid_1d<T: Real>(positions: &[f64], c_axis: usize) -> Result<Tensor<T>> {
    if c_axis == 0 || c_axis % 2 != 0 {
        return Err(Error::invalid("sinusoid_1d", format!("channel count {c_axis} must be even and positive")));
    }
    let pairs = c_axis / 2;
    let mut data = vec![T::zero(); positions.len() * c_axis];
    for (row, &p) in positions.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::non_finite("sinusoid_1d", format!("position {p}")));
        }
        let base = row * c_axis;
        for i in 0..pairs {
            let freq = SINUSOID_BASE.powf(2.0 * i as f64 / c_axis as f64);
            let angle = p / freq;
            data[base + 2 * i] = T::of(angle.sin());
            data[base + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::new(&[positions.len(), c_axis], data)
}

/// Maps index `i` of an axis with `extent` samples onto the training scale:
/// the first sample to 0, the last to [`TRAINING_SCALE`]. A one-sample axis
/// sits at 0.
pub fn normalize_axis_position(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        i as f64 * TRAINING_SCALE / (extent - 1) as f64
    }
}

/// Resolution-normalized 2-D positional encoding, `[C, H, W]`.
///
/// Row and column indices are normalized to `[0, 128]`, each axis is encoded
/// with `C/2` sinusoid channels, and the two encodings are concatenated —
/// row-axis channels first, then column-axis channels.
pub fn normalized_pe_2d<T: Real>(height: usize, width: usize, c: usize) -> Result<Tensor<T>> {
    if c < 4 || c % 2 != 0 {
        return Err(Error::invalid("normalized_pe_2d", format!("channel count {c} must be even and >= 4")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("normalized_pe_2d", "empty image plane"));
    }
    let per_axis = c / 2;
    let row_pos: Vec<f64> = (0..height).map(|i| normalize_axis_position(i, height)).collect();
    let col_pos: Vec<f64> = (0..width).map(|i| normalize_axis_position(i, width)).collect();
    let row_enc = sinusoid_1d::<T>(&row_pos, per_axis)?;
    let col_enc = sinusoid_1d::<T>(&col_pos, per_axis)?;
    let re = row_enc.data();
    let ce = col_enc.data();
    let hw = height * width;
    let mut data = vec![T::zero(); c * hw];
    for y in 0..height {
        for x in 0..width {
            let pix = y * width + x;
            for ch in 0..per_axis {
                data[ch * hw + pix] = re[y * per_axis + ch];
                data[(per_axis + ch) * hw + pix] = ce[x * per_axis + ch];
            }
        }
    }
    Tensor::new(&[c, height, width], data)
}

/// Plain frustum-volume positional encoding before projection: per-cell
/// sinusoids of the three normalized axes, concatenated as `[D·H·W, 3C]`
/// (u-axis channels, then v, then z). All entries lie in `[-1, 1]`.
pub fn fpe_3d_preprojection<T: Real>(
    cam_ref: &Camera,
    depths: &[f64],
    height: usize,
    width: usize,
    c: usize,
) -> Result<Tensor<T>> {
    if c == 0 || c % 2 != 0 {
        return Err(Error::invalid("fpe_3d", format!("channel count {c} must be even and positive")));
    }
    let grid = frustum_normalize(cam_ref, depths, height, width)?;
    let cells = grid.shape()[1];
    let gd = grid.data();
    let mut axes_enc = Vec::with_capacity(3);
    for axis in 0..3 {
        let pos: Vec<f64> = (0..cells).map(|i| gd[axis * cells + i] * TRAINING_SCALE).collect();
        axes_enc.push(sinusoid_1d::<T>(&pos, c)?);
    }
    let mut data = vec![T::zero(); cells * 3 * c];
    for cell in 0..cells {
        for (axis, enc) in axes_enc.iter().enumerate() {
            let src = &enc.data()[cell * c..(cell + 1) * c];
            let dst = cell * 3 * c + axis * c;
            data[dst..dst + c].copy_from_slice(src);
        }
    }
    Tensor::new(&[cells, 3 * c], data)
}

fn check_projection<T: Real>(w: &Tensor<T>, b: &Tensor<T>, c: usize) -> Result<()> {
    if w.rank() != 2 || w.shape()[0] != c || w.shape()[1] != 3 * c {
        return Err(Error::shape(
            "fpe_3d",
            format!("projection weight {:?} must be [{c}, {}]", w.shape(), 3 * c),
        ));
    }
    if b.shape() != [c] {
        return Err(Error::shape("fpe_3d", format!("projection bias {:?} must be [{c}]", b.shape())));
    }
    Ok(())
}

/// Plain frustum-volume positional encoding `[C, D·H·W]`: the pre-projection
/// sinusoids pushed through a learned affine `3C → C`.
pub fn fpe_3d_plain<T: Real>(
    cam_ref: &Camera,
    depths: &[f64],
    height: usize,
    width: usize,
    proj_w: &Tensor<T>,
    proj_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = proj_w.shape()[0];
    check_projection(proj_w, proj_b, c)?;
    let enc = fpe_3d_preprojection::<T>(cam_ref, depths, height, width, c)?;
    // [cells, 3C] x [C, 3C]^T -> [cells, C]
    let mut tokens = matmul_plain(&enc, proj_w, false, true)?;
    let cells = tokens.shape()[0];
    {
        let bd = proj_b.data().to_vec();
        let td = tokens.data_mut();
        for cell in 0..cells {
            for ch in 0..c {
                td[cell * c + ch] = td[cell * c + ch] + bd[ch];
            }
        }
    }
    transpose2d_plain(&tokens)
}

/// Differentiable frustum-volume positional encoding `[C, D·H·W]`; gradients
/// flow into the projection parameters (the geometry is constant).
pub fn fpe_3d<T: Real>(
    tape: &mut Tape<T>,
    cam_ref: &Camera,
    depths: &[f64],
    height: usize,
    width: usize,
    proj_w: NodeId,
    proj_b: NodeId,
) -> Result<NodeId> {
    let c = tape.value(proj_w).shape()[0];
    check_projection(tape.value(proj_w), tape.value(proj_b), c)?;
    let enc = fpe_3d_preprojection::<T>(cam_ref, depths, height, width, c)?;
    let enc_node = tape.constant(enc);
    let prod = matmul(tape, enc_node, proj_w, false, true)?;
    let tokens = add_bias(tape, prod, proj_b)?;
    transpose2d(tape, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::ops;
    use crate::tape::ParamStore;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn test_camera() -> Camera {
        Camera::new(
            [[80.0, 0.0, 16.0], [0.0, 80.0, 12.0], [0.0, 0.0, 1.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
            400.0,
            1000.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_position_alternates_zero_one() {
        let enc = sinusoid_1d::<f64>(&[0.0], 8).unwrap();
        for i in 0..4 {
            assert_eq!(enc.data()[2 * i], 0.0);
            assert_eq!(enc.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn pi_position_zeroes_the_first_sin_channel() {
        // First pair has frequency base^0 = 1, so sin(pi) ~ 0.
        let enc = sinusoid_1d::<f64>(&[std::f64::consts::PI], 6).unwrap();
        assert!(enc.data()[0].abs() < 1e-6);
    }

    #[test]
    fn sinusoid_matches_direct_trig_oracle() {
        let mut rng = seeded_rng(300);
        let positions: Vec<f64> = (0..16).map(|_| rng.gen_range(-200.0..200.0)).collect();
        let c = 10;
        let enc = sinusoid_1d::<f64>(&positions, c).unwrap();
        for (row, &p) in positions.iter().enumerate() {
            for i in 0..c / 2 {
                let freq = SINUSOID_BASE.powf(2.0 * i as f64 / c as f64);
                let s = (p / freq).sin();
                let co = (p / freq).cos();
                assert!((enc.data()[row * c + 2 * i] - s).abs() < 1e-12);
                assert!((enc.data()[row * c + 2 * i + 1] - co).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_channel_count_rejected() {
        assert!(sinusoid_1d::<f64>(&[1.0], 5).is_err());
        assert!(normalized_pe_2d::<f64>(8, 8, 7).is_err());
        assert!(normalized_pe_2d::<f64>(8, 8, 2).is_err());
    }

    #[test]
    fn training_resolution_positions_are_integers() {
        // At 129 samples the normalized positions are exactly 0..=128, so the
        // encoding equals sinusoids evaluated at integer positions.
        let c = 8;
        let pe = normalized_pe_2d::<f64>(129, 129, c).unwrap();
        let per_axis = c / 2;
        let direct = sinusoid_1d::<f64>(&(0..129).map(|i| i as f64).collect::<Vec<_>>(), per_axis).unwrap();
        let hw = 129 * 129;
        for y in [0usize, 7, 64, 128] {
            for ch in 0..per_axis {
                let got = pe.data()[ch * hw + y * 129 + 3];
                let want = direct.data()[y * per_axis + ch];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_corner_encoding_is_resolution_invariant() {
        let c = 12;
        let mut corners = Vec::new();
        for (h, w) in [(65, 65), (129, 129), (257, 193)] {
            let pe = normalized_pe_2d::<f64>(h, w, c).unwrap();
            let hw = h * w;
            let corner: Vec<f64> = (0..c).map(|ch| pe.data()[ch * hw + (h - 1) * w + (w - 1)]).collect();
            corners.push(corner);
        }
        for other in &corners[1..] {
            for (a, b) in corners[0].iter().zip(other.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn double_resolution_midpoint_matches_training_scale_encoding() {
        // Row 128 of a 257-row image normalizes to 64, the training-scale
        // encoding of row 64 at 129 rows.
        let c = 8;
        let fine = normalized_pe_2d::<f64>(257, 257, c).unwrap();
        let coarse = normalized_pe_2d::<f64>(129, 129, c).unwrap();
        let per_axis = c / 2;
        for ch in 0..per_axis {
            let got = fine.data()[ch * 257 * 257 + 128 * 257];
            let want = coarse.data()[ch * 129 * 129 + 64 * 129];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cells_sharing_normalized_position_share_fpe_columns() {
        // Two depth slabs at the same depth: every (y, x) pair of cells
        // shares (u, v, z) and must encode identically.
        let cam = test_camera();
        let mut rng = seeded_rng(301);
        let c = 8;
        let w = Tensor::<f64>::uniform(&[c, 3 * c], -0.5, 0.5, &mut rng);
        let b = Tensor::<f64>::uniform(&[c], -0.5, 0.5, &mut rng);
        let enc = fpe_3d_plain(&cam, &[600.0, 600.0], 3, 4, &w, &b).unwrap();
        let cells = 2 * 3 * 4;
        assert_eq!(enc.shape(), &[c, cells]);
        let per_slab = 12;
        for ch in 0..c {
            for p in 0..per_slab {
                let a = enc.data()[ch * cells + p];
                let d = enc.data()[ch * cells + per_slab + p];
                assert_eq!(a, d);
            }
        }
    }

    #[test]
    fn corner_cells_keep_encodings_when_resolution_doubles() {
        let cam = test_camera();
        let mut rng = seeded_rng(302);
        let c = 6;
        let w = Tensor::<f64>::uniform(&[c, 3 * c], -0.5, 0.5, &mut rng);
        let b = Tensor::<f64>::uniform(&[c], -0.5, 0.5, &mut rng);
        let depths = [400.0, 1000.0];
        let coarse = fpe_3d_plain(&cam, &depths, 4, 6, &w, &b).unwrap();
        let fine = fpe_3d_plain(&cam, &depths, 8, 12, &w, &b).unwrap();
        let cc = 2 * 4 * 6;
        let fc = 2 * 8 * 12;
        // Compare all eight frustum corners.
        for (d_idx, y_c, x_c, y_f, x_f) in [
            (0usize, 0usize, 0usize, 0usize, 0usize),
            (0, 0, 5, 0, 11),
            (0, 3, 0, 7, 0),
            (0, 3, 5, 7, 11),
            (1, 0, 0, 0, 0),
            (1, 0, 5, 0, 11),
            (1, 3, 0, 7, 0),
            (1, 3, 5, 7, 11),
        ] {
            let pc = (d_idx * 4 + y_c) * 6 + x_c;
            let pf = (d_idx * 8 + y_f) * 12 + x_f;
            for ch in 0..c {
                let a = coarse.data()[ch * cc + pc];
                let bv = fine.data()[ch * fc + pf];
                assert!((a - bv).abs() < 1e-9, "channel {ch}: {a} vs {bv}");
            }
        }
    }

    #[test]
    fn zero_projection_gives_zero_encoding() {
        let cam = test_camera();
        let c = 4;
        let w = Tensor::<f64>::zeros(&[c, 3 * c]);
        let b = Tensor::<f64>::zeros(&[c]);
        let enc = fpe_3d_plain(&cam, &[500.0], 2, 2, &w, &b).unwrap();
        for &v in enc.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn preprojection_entries_bounded_by_one() {
        let cam = test_camera();
        let hyp = crate::geometry::inverse_depth_hypotheses(400.0, 1000.0, 6, 0, None, None).unwrap();
        let enc = fpe_3d_preprojection::<f64>(&cam, &hyp.values, 5, 7, 10).unwrap();
        for &v in enc.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn tape_and_plain_fpe_agree_and_projection_gradients_check_out() {
        let cam = test_camera();
        let mut rng = seeded_rng(303);
        let c = 4;
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::uniform(&[c, 3 * c], -0.5, 0.5, &mut rng), true).unwrap();
        let b = store.add("b", Tensor::uniform(&[c], -0.5, 0.5, &mut rng), true).unwrap();
        let probe = Tensor::uniform(&[c, 8], -1.0, 1.0, &mut rng);

        let plain = fpe_3d_plain(&cam, &[450.0, 800.0], 2, 2, store.value(w), store.value(b)).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let node = fpe_3d(&mut tape, &cam, &[450.0, 800.0], 2, 2, wn, bn).unwrap();
        assert_eq!(tape.value(node), &plain);

        let cam2 = cam.clone();
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let wn = tape.param(store, w);
                let bn = tape.param(store, b);
                let node = fpe_3d(tape, &cam2, &[450.0, 800.0], 2, 2, wn, bn)?;
                let weighted = ops::mul_const(tape, node, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            40,
            31,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }
}
