//! Direct 2-D and 3-D convolutions (zero padding, configurable stride).

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, op: &'static str) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(op, "kernel and stride must be positive"));
    }
    if padded < kernel {
        return Err(Error::shape(op, format!("kernel {kernel} exceeds padded extent {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Plain 2-D convolution kernel. `x` is `[Ci, H, W]`, `w` is `[Co, Ci, kh, kw]`,
/// `b` is `[Co]`.
pub fn conv2d_plain<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("x must be [Ci,H,W] and w [Co,Ci,kh,kw], got {:?} / {:?}", x.shape(), w.shape()),
        ));
    }
    let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wci != ci || b.shape() != [co] {
        return Err(Error::shape(
            "conv2d",
            format!("channel mismatch: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let ho = out_extent(h, kh, stride, pad, "conv2d")?;
    let wo = out_extent(wid, kw, stride, pad, "conv2d")?;

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); co * ho * wo];

    for oc in 0..co {
        let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        for v in oplane.iter_mut() {
            *v = bd[oc];
        }
        for ic in 0..ci {
            let xplane = &xd[ic * h * wid..(ic + 1) * h * wid];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                    // Valid output range for this kernel tap.
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wid..(iy as usize + 1) * wid];
                        let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            orow[ox] = orow[ox] + wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }

    Tensor::new(&[co, ho, wo], out)
}

/// Differentiable 2-D convolution.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let out = conv2d_plain(&xv, &wv, &bv, stride, pad)?;
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let (ci, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (co, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
            let (ho, wo) = (g.shape()[1], g.shape()[2]);
            let xd = xv.data();
            let wd = wv.data();
            let gd = g.data();

            let mut dx = vec![T::zero(); ci * h * wid];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut db = vec![T::zero(); co];

            for oc in 0..co {
                let gplane = &gd[oc * ho * wo..(oc + 1) * ho * wo];
                let mut acc = T::zero();
                for &gv in gplane {
                    acc = acc + gv;
                }
                db[oc] = acc;
                for ic in 0..ci {
                    let xplane = &xd[ic * h * wid..(ic + 1) * h * wid];
                    let dxplane_base = ic * h * wid;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                            let wv_tap = wd[widx];
                            let mut wacc = T::zero();
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    let gv = grow[ox];
                                    wacc = wacc + gv * xplane[iy as usize * wid + ix as usize];
                                    dx[dxplane_base + iy as usize * wid + ix as usize] =
                                        dx[dxplane_base + iy as usize * wid + ix as usize] + gv * wv_tap;
                                }
                            }
                            dw[widx] = dw[widx] + wacc;
                        }
                    }
                }
            }

            sink.add(x, Tensor::new(xv.shape(), dx).expect("shape"));
            sink.add(w, Tensor::new(wv.shape(), dw).expect("shape"));
            sink.add(b, Tensor::new(&[co], db).expect("shape"));
        }),
    ))
}

/// Plain 3-D convolution kernel. `x` is `[Ci, D, H, W]`, `w` is
/// `[Co, Ci, kd, kh, kw]`, `b` is `[Co]`.
pub fn conv3d_plain<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("x must be [Ci,D,H,W] and w [Co,Ci,kd,kh,kw], got {:?} / {:?}", x.shape(), w.shape()),
        ));
    }
    let (ci, d, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kd, kh, kw) =
        (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]);
    if wci != ci || b.shape() != [co] {
        return Err(Error::shape(
            "conv3d",
            format!("channel mismatch: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let do_ = out_extent(d, kd, stride, pad, "conv3d")?;
    let ho = out_extent(h, kh, stride, pad, "conv3d")?;
    let wo = out_extent(wid, kw, stride, pad, "conv3d")?;

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); co * do_ * ho * wo];

    for oc in 0..co {
        let ovol = &mut out[oc * do_ * ho * wo..(oc + 1) * do_ * ho * wo];
        for v in ovol.iter_mut() {
            *v = bd[oc];
        }
        for ic in 0..ci {
            let xvol = &xd[ic * d * h * wid..(ic + 1) * d * h * wid];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[(((oc * ci + ic) * kd + kz) * kh + ky) * kw + kx];
                        for oz in 0..do_ {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xvol
                                    [(iz as usize * h + iy as usize) * wid..(iz as usize * h + iy as usize + 1) * wid];
                                let orow = &mut ovol[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    orow[ox] = orow[ox] + wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor::new(&[co, do_, ho, wo], out)
}

/// Differentiable 3-D convolution.
pub fn conv3d<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let out = conv3d_plain(&xv, &wv, &bv, stride, pad)?;
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let (ci, d, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (co, _, kd, kh, kw) =
                (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3], wv.shape()[4]);
            let (do_, ho, wo) = (g.shape()[1], g.shape()[2], g.shape()[3]);
            let xd = xv.data();
            let wd = wv.data();
            let gd = g.data();

            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut db = vec![T::zero(); co];

            for oc in 0..co {
                let gvol = &gd[oc * do_ * ho * wo..(oc + 1) * do_ * ho * wo];
                let mut acc = T::zero();
                for &gv in gvol {
                    acc = acc + gv;
                }
                db[oc] = acc;
                for ic in 0..ci {
                    let xvol_base = ic * d * h * wid;
                    for kz in 0..kd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = (((oc * ci + ic) * kd + kz) * kh + ky) * kw + kx;
                                let wv_tap = wd[widx];
                                let mut wacc = T::zero();
                                for oz in 0..do_ {
                                    let iz = (oz * stride + kz) as isize - pad as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wid as isize {
                                                continue;
                                            }
                                            let gv = gvol[(oz * ho + oy) * wo + ox];
                                            let xi = xvol_base
                                                + (iz as usize * h + iy as usize) * wid
                                                + ix as usize;
                                            wacc = wacc + gv * xd[xi];
                                            dx[xi] = dx[xi] + gv * wv_tap;
                                        }
                                    }
                                }
                                dw[widx] = dw[widx] + wacc;
                            }
                        }
                    }
                }
            }

            sink.add(x, Tensor::new(xv.shape(), dx).expect("shape"));
            sink.add(w, Tensor::new(wv.shape(), dw).expect("shape"));
            sink.add(b, Tensor::new(&[co], db).expect("shape"));
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::ops;
    use crate::tape::ParamStore;
    use crate::tensor::seeded_rng;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_f64s(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::from_f64s(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d_plain(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = seeded_rng(13);
        let x = Tensor::<f64>::uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], -1.0, 1.0, &mut rng);
        let stride = 2;
        let pad = 1;
        let y = conv2d_plain(&x, &w, &b, stride, pad).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        // Naive quadruple-loop oracle.
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 6 {
                                    continue;
                                }
                                acc += w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                    * x.data()[ic * 30 + iy as usize * 6 + ix as usize];
                            }
                        }
                    }
                    let got = y.data()[oc * 9 + oy * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = seeded_rng(14);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng), true).unwrap();
        let w = store.add("w", Tensor::uniform(&[2, 2, 3, 3], -0.5, 0.5, &mut rng), true).unwrap();
        let b = store.add("b", Tensor::uniform(&[2], -0.5, 0.5, &mut rng), true).unwrap();
        let probe = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let wn = tape.param(store, w);
                let bn = tape.param(store, b);
                let y = conv2d(tape, xn, wn, bn, 2, 1)?;
                let weighted = ops::mul_const(tape, y, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            48,
            15,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = seeded_rng(15);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng), true).unwrap();
        let w = store.add("w", Tensor::uniform(&[2, 2, 3, 3, 3], -0.3, 0.3, &mut rng), true).unwrap();
        let b = store.add("b", Tensor::uniform(&[2], -0.5, 0.5, &mut rng), true).unwrap();
        let probe = Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let wn = tape.param(store, w);
                let bn = tape.param(store, b);
                let y = conv3d(tape, xn, wn, bn, 1, 1)?;
                let weighted = ops::mul_const(tape, y, &probe)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            40,
            16,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(conv2d_plain(&x, &w, &b, 1, 0).is_err());
    }
}
