//! Non-overlapping 3-D block embedding and its inverse.
//!
//! `patchify3d` tiles a `[C_in, D, H, W]` volume into `(pd, ph, pw)` blocks
//! and maps each flattened block through a learned affine to a `C_out` vector,
//! producing `[C_out, D/pd, H/ph, W/pw]` — a strided convolution whose kernel
//! equals its stride. `unpatchify3d` is the mirrored expansion. Both are
//! block-local: one input block influences exactly one output cell and vice
//! versa.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Block extents used by the cost-volume sequence embedding.
pub const COST_PATCH: (usize, usize, usize) = (2, 4, 4);

fn check_divisible(shape: &[usize], patch: (usize, usize, usize), op: &'static str) -> Result<(usize, usize, usize)> {
    let (pd, ph, pw) = patch;
    if pd == 0 || ph == 0 || pw == 0 {
        return Err(Error::invalid(op, "patch extents must be positive"));
    }
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    if d % pd != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::shape(
            op,
            format!("volume {:?} not divisible by patch ({pd},{ph},{pw})", shape),
        ));
    }
    Ok((d / pd, h / ph, w / pw))
}

/// Gathers one block of `x` (`[C_in, D, H, W]`) into `buf` (length
/// `C_in * pd * ph * pw`), channel-major then (dz, dy, dx) row-major.
fn gather_block<T: Real>(
    xd: &[T],
    c_in: usize,
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    cell: (usize, usize, usize),
    buf: &mut [T],
) {
    let (d, h, w) = dims;
    let (pd, ph, pw) = patch;
    let (dk, yk, xk) = cell;
    let mut i = 0;
    for c in 0..c_in {
        let cb = c * d * h * w;
        for dz in 0..pd {
            let zb = cb + (dk * pd + dz) * h * w;
            for dy in 0..ph {
                let rb = zb + (yk * ph + dy) * w + xk * pw;
                buf[i..i + pw].copy_from_slice(&xd[rb..rb + pw]);
                i += pw;
            }
        }
    }
}

fn scatter_block<T: Real>(
    xd: &mut [T],
    c_in: usize,
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    cell: (usize, usize, usize),
    buf: &[T],
) {
    let (d, h, w) = dims;
    let (pd, ph, pw) = patch;
    let (dk, yk, xk) = cell;
    let mut i = 0;
    for c in 0..c_in {
        let cb = c * d * h * w;
        for dz in 0..pd {
            let zb = cb + (dk * pd + dz) * h * w;
            for dy in 0..ph {
                let rb = zb + (yk * ph + dy) * w + xk * pw;
                for dx in 0..pw {
                    xd[rb + dx] = xd[rb + dx] + buf[i];
                    i += 1;
                }
            }
        }
    }
}

/// Plain patchify kernel. `w` is `[C_out, C_in*pd*ph*pw]`, `b` is `[C_out]`.
pub fn patchify3d_plain<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    patch: (usize, usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("patchify3d", format!("expected [C,D,H,W], got {:?}", x.shape())));
    }
    let (dp, hp, wp) = check_divisible(x.shape(), patch, "patchify3d")?;
    let c_in = x.shape()[0];
    let block = c_in * patch.0 * patch.1 * patch.2;
    if w.rank() != 2 || w.shape()[1] != block {
        return Err(Error::shape(
            "patchify3d",
            format!("weight {:?} must be [C_out, {block}]", w.shape()),
        ));
    }
    let c_out = w.shape()[0];
    if b.shape() != [c_out] {
        return Err(Error::shape("patchify3d", format!("bias {:?} must be [{c_out}]", b.shape())));
    }

    let dims = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let cells = dp * hp * wp;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); c_out * cells];
    let mut buf = vec![T::zero(); block];

    let mut cell_idx = 0;
    for dk in 0..dp {
        for yk in 0..hp {
            for xk in 0..wp {
                gather_block(xd, c_in, dims, patch, (dk, yk, xk), &mut buf);
                for c in 0..c_out {
                    let wrow = &wd[c * block..(c + 1) * block];
                    let mut acc = bd[c];
                    for (&wv, &xv) in wrow.iter().zip(buf.iter()) {
                        acc = acc + wv * xv;
                    }
                    out[c * cells + cell_idx] = acc;
                }
                cell_idx += 1;
            }
        }
    }

    Tensor::new(&[c_out, dp, hp, wp], out)
}

/// Differentiable patchify.
pub fn patchify3d<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    patch: (usize, usize, usize),
) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let out = patchify3d_plain(&xv, &wv, &bv, patch)?;
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let c_in = xv.shape()[0];
            let dims = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (dp, hp, wp) = (g.shape()[1], g.shape()[2], g.shape()[3]);
            let cells = dp * hp * wp;
            let c_out = g.shape()[0];
            let block = wv.shape()[1];
            let xd = xv.data();
            let wd = wv.data();
            let gd = g.data();

            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut db = vec![T::zero(); c_out];
            let mut buf = vec![T::zero(); block];
            let mut dbuf = vec![T::zero(); block];

            let mut cell_idx = 0;
            for dk in 0..dp {
                for yk in 0..hp {
                    for xk in 0..wp {
                        gather_block(xd, c_in, dims, patch, (dk, yk, xk), &mut buf);
                        for v in dbuf.iter_mut() {
                            *v = T::zero();
                        }
                        for c in 0..c_out {
                            let gv = gd[c * cells + cell_idx];
                            db[c] = db[c] + gv;
                            let wrow = &wd[c * block..(c + 1) * block];
                            let dwrow = &mut dw[c * block..(c + 1) * block];
                            for e in 0..block {
                                dbuf[e] = dbuf[e] + gv * wrow[e];
                                dwrow[e] = dwrow[e] + gv * buf[e];
                            }
                        }
                        scatter_block(&mut dx, c_in, dims, patch, (dk, yk, xk), &dbuf);
                        cell_idx += 1;
                    }
                }
            }

            sink.add(x, Tensor::new(xv.shape(), dx).expect("shape"));
            sink.add(w, Tensor::new(wv.shape(), dw).expect("shape"));
            sink.add(b, Tensor::new(&[c_out], db).expect("shape"));
        }),
    ))
}

/// Plain unpatchify kernel: expands `[C_in, D', H', W']` to
/// `[C_out, D'*pd, H'*ph, W'*pw]`. `w` is `[C_in, C_out*pd*ph*pw]` (each input
/// channel holds its additive contribution to the flattened output block),
/// `b` is `[C_out]`.
pub fn unpatchify3d_plain<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    patch: (usize, usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("unpatchify3d", format!("expected [C,D',H',W'], got {:?}", x.shape())));
    }
    let (pd, ph, pw) = patch;
    if pd == 0 || ph == 0 || pw == 0 {
        return Err(Error::invalid("unpatchify3d", "patch extents must be positive"));
    }
    let c_in = x.shape()[0];
    if w.rank() != 2 || w.shape()[0] != c_in {
        return Err(Error::shape(
            "unpatchify3d",
            format!("weight {:?} must be [{c_in}, C_out*pd*ph*pw]", w.shape()),
        ));
    }
    let per_block = pd * ph * pw;
    if w.shape()[1] % per_block != 0 {
        return Err(Error::shape(
            "unpatchify3d",
            format!("weight width {} not divisible by block volume {per_block}", w.shape()[1]),
        ));
    }
    let c_out = w.shape()[1] / per_block;
    if b.shape() != [c_out] {
        return Err(Error::shape("unpatchify3d", format!("bias {:?} must be [{c_out}]", b.shape())));
    }

    let (dp, hp, wp) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let cells = dp * hp * wp;
    let (d, h, wid) = (dp * pd, hp * ph, wp * pw);
    let block = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();

    // Start from the bias broadcast over every output element.
    let mut out = vec![T::zero(); c_out * d * h * wid];
    for co in 0..c_out {
        for v in out[co * d * h * wid..(co + 1) * d * h * wid].iter_mut() {
            *v = bd[co];
        }
    }

    let dims = (d, h, wid);
    let mut buf = vec![T::zero(); block];
    let mut cell_idx = 0;
    for dk in 0..dp {
        for yk in 0..hp {
            for xk in 0..wp {
                for v in buf.iter_mut() {
                    *v = T::zero();
                }
                for c in 0..c_in {
                    let xv = xd[c * cells + cell_idx];
                    let wrow = &wd[c * block..(c + 1) * block];
                    for (bv, &wv) in buf.iter_mut().zip(wrow.iter()) {
                        *bv = *bv + xv * wv;
                    }
                }
                scatter_block(&mut out, c_out, dims, patch, (dk, yk, xk), &buf);
                cell_idx += 1;
            }
        }
    }

    Tensor::new(&[c_out, d, h, wid], out)
}

/// Differentiable unpatchify.
pub fn unpatchify3d<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    patch: (usize, usize, usize),
) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let out = unpatchify3d_plain(&xv, &wv, &bv, patch)?;
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let c_in = xv.shape()[0];
            let (dp, hp, wp) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let cells = dp * hp * wp;
            let block = wv.shape()[1];
            let per_block = patch.0 * patch.1 * patch.2;
            let c_out = block / per_block;
            let dims = (g.shape()[1], g.shape()[2], g.shape()[3]);
            let xd = xv.data();
            let wd = wv.data();
            let gd = g.data();

            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut db = vec![T::zero(); c_out];
            let mut gbuf = vec![T::zero(); block];

            let mut cell_idx = 0;
            for dk in 0..dp {
                for yk in 0..hp {
                    for xk in 0..wp {
                        gather_block(gd, c_out, dims, patch, (dk, yk, xk), &mut gbuf);
                        for c in 0..c_in {
                            let xval = xd[c * cells + cell_idx];
                            let wrow = &wd[c * block..(c + 1) * block];
                            let dwrow = &mut dw[c * block..(c + 1) * block];
                            let mut acc = T::zero();
                            for e in 0..block {
                                acc = acc + wrow[e] * gbuf[e];
                                dwrow[e] = dwrow[e] + xval * gbuf[e];
                            }
                            dx[c * cells + cell_idx] = acc;
                        }
                        cell_idx += 1;
                    }
                }
            }
            // Bias gradient: every output element sees its channel bias once.
            let (d, h, wid) = dims;
            for co in 0..c_out {
                let mut acc = T::zero();
                for &gv in &gd[co * d * h * wid..(co + 1) * d * h * wid] {
                    acc = acc + gv;
                }
                db[co] = acc;
            }

            sink.add(x, Tensor::new(xv.shape(), dx).expect("shape"));
            sink.add(w, Tensor::new(wv.shape(), dw).expect("shape"));
            sink.add(b, Tensor::new(&[c_out], db).expect("shape"));
        }),
    ))
}
