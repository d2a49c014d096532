//! Spatial sampling ops: bilinear gather and nearest-neighbor upsampling.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Plain bilinear sampling kernel.
///
/// `src` is `[C, H, W]`; `coords` is `[2, Ho, Wo]` holding source-pixel
/// positions with channel 0 = x (column) and channel 1 = y (row). Samples with
/// all of `0 <= x <= W-1` and `0 <= y <= H-1` are interpolated from the four
/// surrounding pixels; out-of-bounds samples produce 0 with mask 0.
///
/// Returns `(values [C, Ho, Wo], mask [Ho, Wo])`.
pub fn bilinear_sample_plain<T: Real>(
    src: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if src.rank() != 3 {
        return Err(Error::shape("bilinear_sample", format!("src must be [C,H,W], got {:?}", src.shape())));
    }
    if coords.rank() != 3 || coords.shape()[0] != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coords must be [2,Ho,Wo], got {:?}", coords.shape()),
        ));
    }
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (ho, wo) = (coords.shape()[1], coords.shape()[2]);
    let npix = ho * wo;
    let sd = src.data();
    let cd = coords.data();

    let mut out = vec![T::zero(); c * npix];
    let mut mask = vec![T::zero(); npix];

    for p in 0..npix {
        let x = cd[p].to_f64();
        let y = cd[npix + p].to_f64();
        if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
            continue;
        }
        mask[p] = T::one();
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = T::of(x - x0 as f64);
        let fy = T::of(y - y0 as f64);
        let one = T::one();
        let w00 = (one - fy) * (one - fx);
        let w01 = (one - fy) * fx;
        let w10 = fy * (one - fx);
        let w11 = fy * fx;
        for ch in 0..c {
            let plane = &sd[ch * h * w..(ch + 1) * h * w];
            let v = w00 * plane[y0 * w + x0]
                + w01 * plane[y0 * w + x1]
                + w10 * plane[y1 * w + x0]
                + w11 * plane[y1 * w + x1];
            out[ch * npix + p] = v;
        }
    }

    Ok((
        Tensor::new(&[c, ho, wo], out)?,
        Tensor::new(&[ho, wo], mask)?,
    ))
}

/// Differentiable bilinear sampling.
///
/// Gradients flow into both the source image and the coordinates (the spatial
/// derivative of the interpolant); out-of-bounds samples contribute nothing.
/// The validity mask is returned as plain data — it is a step function of the
/// coordinates and carries no gradient.
pub fn bilinear_sample<T: Real>(
    tape: &mut Tape<T>,
    src: NodeId,
    coords: NodeId,
) -> Result<(NodeId, Tensor<T>)> {
    let sv = tape.value(src).clone();
    let cv = tape.value(coords).clone();
    let (out, mask) = bilinear_sample_plain(&sv, &cv)?;
    let needs = tape.needs_grad(src) || tape.needs_grad(coords);
    let node = tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let (c, h, w) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
            let (ho, wo) = (cv.shape()[1], cv.shape()[2]);
            let npix = ho * wo;
            let sd = sv.data();
            let cd = cv.data();
            let gd = g.data();

            let mut dsrc = vec![T::zero(); c * h * w];
            let mut dcoords = vec![T::zero(); 2 * npix];

            for p in 0..npix {
                let x = cd[p].to_f64();
                let y = cd[npix + p].to_f64();
                if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
                    continue;
                }
                let x0 = x.floor() as usize;
                let y0 = y.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = T::of(x - x0 as f64);
                let fy = T::of(y - y0 as f64);
                let one = T::one();
                let w00 = (one - fy) * (one - fx);
                let w01 = (one - fy) * fx;
                let w10 = fy * (one - fx);
                let w11 = fy * fx;
                let mut gx = T::zero();
                let mut gy = T::zero();
                for ch in 0..c {
                    let gv = gd[ch * npix + p];
                    let base = ch * h * w;
                    let s00 = sd[base + y0 * w + x0];
                    let s01 = sd[base + y0 * w + x1];
                    let s10 = sd[base + y1 * w + x0];
                    let s11 = sd[base + y1 * w + x1];
                    dsrc[base + y0 * w + x0] = dsrc[base + y0 * w + x0] + gv * w00;
                    dsrc[base + y0 * w + x1] = dsrc[base + y0 * w + x1] + gv * w01;
                    dsrc[base + y1 * w + x0] = dsrc[base + y1 * w + x0] + gv * w10;
                    dsrc[base + y1 * w + x1] = dsrc[base + y1 * w + x1] + gv * w11;
                    gx = gx + gv * ((one - fy) * (s01 - s00) + fy * (s11 - s10));
                    gy = gy + gv * ((one - fx) * (s10 - s00) + fx * (s11 - s01));
                }
                dcoords[p] = gx;
                dcoords[npix + p] = gy;
            }

            sink.add(src, Tensor::new(sv.shape(), dsrc).expect("shape"));
            sink.add(coords, Tensor::new(cv.shape(), dcoords).expect("shape"));
        }),
    );
    Ok((node, mask))
}

/// Plain 2x nearest-neighbor upsampling kernel for `[C, H, W]`.
pub fn upsample2x_nearest_plain<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("upsample2x_nearest", format!("expected [C,H,W], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![T::zero(); c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            let srow = &xd[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            for dy in 0..2 {
                let orow = &mut out[ch * h2 * w2 + (2 * y + dy) * w2..ch * h2 * w2 + (2 * y + dy + 1) * w2];
                for (xix, &v) in srow.iter().enumerate() {
                    orow[2 * xix] = v;
                    orow[2 * xix + 1] = v;
                }
            }
        }
    }
    Tensor::new(&[c, h2, w2], out)
}

/// Differentiable 2x nearest-neighbor upsampling.
pub fn upsample2x_nearest<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x);
    let out = upsample2x_nearest_plain(xv)?;
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let (h2, w2) = (2 * h, 2 * w);
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = T::zero();
                        for dy in 0..2 {
                            for dxo in 0..2 {
                                acc = acc + gd[ch * h2 * w2 + (2 * y + dy) * w2 + 2 * xx + dxo];
                            }
                        }
                        dx[ch * h * w + y * w + xx] = acc;
                    }
                }
            }
            sink.add(x, Tensor::new(&[c, h, w], dx).expect("shape"));
        }),
    ))
}
