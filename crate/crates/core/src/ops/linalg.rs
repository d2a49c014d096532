//! Matrix products and row/column structured ops.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Plain matrix product kernel with optional transposes.
///
/// Logical operands are `A = a` (or `a^T` when `ta`) of shape `[n, k]` and
/// `B = b` (or `b^T` when `tb`) of shape `[k, m]`; the result is `[n, m]`.
/// Loop orders are chosen so the innermost loop walks contiguous memory for
/// the common `NN` and `NT` cases.
pub fn matmul_plain<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, ka) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let (kb, m) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("contraction mismatch: {:?} (ta={}) vs {:?} (tb={})", a.shape(), ta, b.shape(), tb),
        ));
    }
    let k = ka;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); n * m];

    match (ta, tb) {
        (false, false) => {
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &bd[kk * m..(kk + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o = *o + aik * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&av, &bv) in arow.iter().zip(brow.iter()) {
                        acc = acc + av * bv;
                    }
                    *o = acc;
                }
            }
        }
        (true, false) => {
            // a stored [k, n]; out[i, j] += a[kk, i] * b[kk, j]
            for kk in 0..k {
                let arow = &ad[kk * n..(kk + 1) * n];
                let brow = &bd[kk * m..(kk + 1) * m];
                for (i, &av) in arow.iter().enumerate() {
                    let orow = &mut out[i * m..(i + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // a stored [k, n], b stored [m, k]; out[i, j] = sum_kk a[kk, i] * b[j, kk]
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (kk, &bv) in brow.iter().enumerate() {
                        acc = acc + ad[kk * n + i] * bv;
                    }
                    *o = acc;
                }
            }
        }
    }

    Tensor::new(&[n, m], out)
}

/// Differentiable matrix product with optional operand transposes.
pub fn matmul<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let out = matmul_plain(&av, &bv, ta, tb)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let (da, db) = match (ta, tb) {
                (false, false) => (
                    matmul_plain(g, &bv, false, true),
                    matmul_plain(&av, g, true, false),
                ),
                (false, true) => (
                    matmul_plain(g, &bv, false, false),
                    matmul_plain(g, &av, true, false),
                ),
                (true, false) => (
                    matmul_plain(&bv, g, false, true),
                    matmul_plain(&av, g, false, false),
                ),
                (true, true) => (
                    matmul_plain(&bv, g, true, true),
                    matmul_plain(g, &av, true, true),
                ),
            };
            sink.add(a, da.expect("matmul backward shape"));
            sink.add(b, db.expect("matmul backward shape"));
        }),
    ))
}

/// Plain kernel of [`add_bias`].
pub fn add_bias_plain<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.rank() != 1 || x.rank() < 1 || *x.shape().last().unwrap() != bias.shape()[0] {
        return Err(Error::shape(
            "add_bias",
            format!("x {:?} vs bias {:?}", x.shape(), bias.shape()),
        ));
    }
    let d = bias.shape()[0];
    let rows = x.numel() / d;
    let bd = bias.data();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        for (o, &b) in row.iter_mut().zip(bd.iter()) {
            *o = *o + b;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Plain kernel of [`mul_channel`].
pub fn mul_channel_plain<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.rank() != 1 || x.rank() < 1 || *x.shape().last().unwrap() != s.shape()[0] {
        return Err(Error::shape(
            "mul_channel",
            format!("x {:?} vs scales {:?}", x.shape(), s.shape()),
        ));
    }
    let d = s.shape()[0];
    let rows = x.numel() / d;
    let sd = s.data();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        for (o, &sc) in row.iter_mut().zip(sd.iter()) {
            *o = *o * sc;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Plain kernel of [`slice_cols`].
pub fn slice_cols_plain<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("slice_cols", format!("expected rank 2, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if start + len > d || len == 0 {
        return Err(Error::invalid(
            "slice_cols",
            format!("slice [{start}, {}) out of 0..{d}", start + len),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * len);
    for r in 0..n {
        out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
    }
    Tensor::new(&[n, len], out)
}

/// Plain kernel of [`concat_cols`].
pub fn concat_cols_plain<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_cols", "no parts"));
    }
    let n = parts[0].shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != 2 || p.shape()[0] != n {
            return Err(Error::shape(
                "concat_cols",
                format!("part shape {:?} incompatible with {} rows", p.shape(), n),
            ));
        }
        widths.push(p.shape()[1]);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![T::zero(); n * total];
    let mut offset = 0usize;
    for (p, &w) in parts.iter().zip(widths.iter()) {
        let pd = p.data();
        for r in 0..n {
            out[r * total + offset..r * total + offset + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    Tensor::new(&[n, total], out)
}

/// Adds a `[d]` bias to each trailing-axis row of `x`.
pub fn add_bias<T: Real>(tape: &mut Tape<T>, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let xv = tape.value(x);
    let bv = tape.value(bias);
    if bv.rank() != 1 || xv.rank() < 1 || *xv.shape().last().unwrap() != bv.shape()[0] {
        return Err(Error::shape(
            "add_bias",
            format!("x {:?} vs bias {:?}", xv.shape(), bv.shape()),
        ));
    }
    let d = bv.shape()[0];
    let rows = xv.numel() / d;
    let bd = bv.data();
    let mut out = xv.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        for (o, &b) in row.iter_mut().zip(bd.iter()) {
            *o = *o + b;
        }
    }
    let shape = xv.shape().to_vec();
    let needs = tape.needs_grad(x) || tape.needs_grad(bias);
    Ok(tape.op(
        Tensor::new(&shape, out)?,
        needs,
        Box::new(move |g, sink| {
            sink.add(x, g.clone());
            let gd = g.data();
            let mut db = vec![T::zero(); d];
            for r in 0..rows {
                let row = &gd[r * d..(r + 1) * d];
                for (o, &gv) in db.iter_mut().zip(row.iter()) {
                    *o = *o + gv;
                }
            }
            sink.add(bias, Tensor::new(&[d], db).expect("shape"));
        }),
    ))
}

/// Multiplies each trailing-axis row of `x` elementwise by a `[d]` vector.
///
/// This is the per-channel gating used by learned channel scales.
pub fn mul_channel<T: Real>(tape: &mut Tape<T>, x: NodeId, s: NodeId) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let sv = tape.value(s).clone();
    if sv.rank() != 1 || xv.rank() < 1 || *xv.shape().last().unwrap() != sv.shape()[0] {
        return Err(Error::shape(
            "mul_channel",
            format!("x {:?} vs scales {:?}", xv.shape(), sv.shape()),
        ));
    }
    let d = sv.shape()[0];
    let rows = xv.numel() / d;
    let sd = sv.data();
    let mut out = xv.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        for (o, &sc) in row.iter_mut().zip(sd.iter()) {
            *o = *o * sc;
        }
    }
    let shape = xv.shape().to_vec();
    let needs = tape.needs_grad(x) || tape.needs_grad(s);
    Ok(tape.op(
        Tensor::new(&shape, out)?,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let sd = sv.data();
            let xd = xv.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut ds = vec![T::zero(); d];
            for r in 0..rows {
                for c in 0..d {
                    let i = r * d + c;
                    dx[i] = gd[i] * sd[c];
                    ds[c] = ds[c] + gd[i] * xd[i];
                }
            }
            sink.add(x, Tensor::new(xv.shape(), dx).expect("shape"));
            sink.add(s, Tensor::new(&[d], ds).expect("shape"));
        }),
    ))
}

/// Plain transpose of a `[n, m]` matrix.
pub fn transpose2d_plain<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("transpose2d", format!("expected rank 2, got {:?}", x.shape())));
    }
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = xd[i * m + j];
        }
    }
    Tensor::new(&[m, n], out)
}

/// Differentiable transpose of a `[n, m]` matrix.
pub fn transpose2d<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let out = transpose2d_plain(tape.value(x))?;
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(x, transpose2d_plain(g).expect("transpose grad"));
        }),
    ))
}

/// Extracts columns `[start, start+len)` of a `[n, d]` matrix.
pub fn slice_cols<T: Real>(tape: &mut Tape<T>, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 2 {
        return Err(Error::shape("slice_cols", format!("expected rank 2, got {:?}", xv.shape())));
    }
    let (n, d) = (xv.shape()[0], xv.shape()[1]);
    if start + len > d || len == 0 {
        return Err(Error::invalid(
            "slice_cols",
            format!("slice [{start}, {}) out of 0..{d}", start + len),
        ));
    }
    let xd = xv.data();
    let mut out = Vec::with_capacity(n * len);
    for r in 0..n {
        out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
    }
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        Tensor::new(&[n, len], out)?,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * d];
            for r in 0..n {
                dx[r * d + start..r * d + start + len]
                    .copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            sink.add(x, Tensor::new(&[n, d], dx).expect("shape"));
        }),
    ))
}

/// Concatenates `[n, d_i]` matrices along the column axis.
pub fn concat_cols<T: Real>(tape: &mut Tape<T>, parts: &[NodeId]) -> Result<NodeId> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_cols", "no parts"));
    }
    let n = tape.value(parts[0]).shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for &p in parts {
        let v = tape.value(p);
        if v.rank() != 2 || v.shape()[0] != n {
            return Err(Error::shape(
                "concat_cols",
                format!("part shape {:?} incompatible with {} rows", v.shape(), n),
            ));
        }
        widths.push(v.shape()[1]);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![T::zero(); n * total];
    let mut offset = 0usize;
    for (&p, &w) in parts.iter().zip(widths.iter()) {
        let pd = tape.value(p).data();
        for r in 0..n {
            out[r * total + offset..r * total + offset + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let needs = parts.iter().any(|&p| tape.needs_grad(p));
    let parts = parts.to_vec();
    Ok(tape.op(
        Tensor::new(&[n, total], out)?,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let mut offset = 0usize;
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let mut dp = Vec::with_capacity(n * w);
                for r in 0..n {
                    dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                }
                sink.add(p, Tensor::new(&[n, w], dp).expect("shape"));
                offset += w;
            }
        }),
    ))
}

/// Divides each row of `[n, d]` by the matching entry of a `[n]` vector.
///
/// The caller is responsible for keeping the denominator bounded away from
/// zero (e.g. by adding an epsilon beforehand).
pub fn div_by_col<T: Real>(tape: &mut Tape<T>, x: NodeId, den: NodeId) -> Result<NodeId> {
    let xv = tape.value(x);
    let dv = tape.value(den).clone();
    if xv.rank() != 2 || dv.rank() != 1 || xv.shape()[0] != dv.shape()[0] {
        return Err(Error::shape(
            "div_by_col",
            format!("x {:?} vs denominator {:?}", xv.shape(), dv.shape()),
        ));
    }
    let (n, d) = (xv.shape()[0], xv.shape()[1]);
    let xd = xv.data();
    let dd = dv.data();
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        let inv = T::one() / dd[r];
        for c in 0..d {
            out[r * d + c] = xd[r * d + c] * inv;
        }
    }
    let out = Tensor::new(&[n, d], out)?;
    let out_cap = out.clone();
    let needs = tape.needs_grad(x) || tape.needs_grad(den);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let od = out_cap.data();
            let dd = dv.data();
            let mut dx = vec![T::zero(); n * d];
            let mut dden = vec![T::zero(); n];
            for r in 0..n {
                let inv = T::one() / dd[r];
                let mut acc = T::zero();
                for c in 0..d {
                    let i = r * d + c;
                    dx[i] = gd[i] * inv;
                    acc = acc + gd[i] * od[i];
                }
                dden[r] = -acc * inv;
            }
            sink.add(x, Tensor::new(&[n, d], dx).expect("shape"));
            sink.add(den, Tensor::new(&[n], dden).expect("shape"));
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
    fn matmul_matches_naive_oracle_for_all_transpose_flags() {
        let mut rng = seeded_rng(3);
        let n = 4;
        let k = 5;
        let m = 3;
        let a = Tensor::<f64>::uniform(&[n, k], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[k, m], -1.0, 1.0, &mut rng);
        let at = transpose(&a);
        let bt = transpose(&b);

        let naive = {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.data()[i * k + kk] * b.data()[kk * m + j];
                    }
                    out[i * m + j] = acc;
                }
            }
            Tensor::new(&[n, m], out).unwrap()
        };

        for (x, y, ta, tb) in [
            (a.clone(), b.clone(), false, false),
            (a.clone(), bt.clone(), false, true),
            (at.clone(), b.clone(), true, false),
            (at.clone(), bt.clone(), true, true),
        ] {
            let got = matmul_plain(&x, &y, ta, tb).unwrap();
            assert!(got.max_abs_diff(&naive).unwrap() < 1e-12, "flags ({ta}, {tb})");
        }
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Tensor::new(&[c, r], out).unwrap()
    }

    #[test]
    fn matmul_gradients_for_all_flag_combinations() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut rng = seeded_rng(17 + ta as u64 + 2 * tb as u64);
            let mut store = ParamStore::<f64>::new();
            let ash = if ta { [5, 4] } else { [4, 5] };
            let bsh = if tb { [3, 5] } else { [5, 3] };
            let a = store.add("a", Tensor::uniform(&ash, -1.0, 1.0, &mut rng), true).unwrap();
            let b = store.add("b", Tensor::uniform(&bsh, -1.0, 1.0, &mut rng), true).unwrap();
            let w = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
            let report = check_gradient(
                &mut store,
                move |tape, store| {
                    let an = tape.param(store, a);
                    let bn = tape.param(store, b);
                    let c = matmul(tape, an, bn, ta, tb)?;
                    let cw = ops::mul_const(tape, c, &w)?;
                    ops::sum_all(tape, cw)
                },
                DEFAULT_STEP,
                64,
                1,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-8, "flags ({ta},{tb}): {}", report.max_rel_err);
        }
    }

    #[test]
    fn structured_ops_gradients() {
        let mut rng = seeded_rng(23);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng), true).unwrap();
        let bias = store.add("b", Tensor::uniform(&[6], -1.0, 1.0, &mut rng), true).unwrap();
        let scales = store.add("s", Tensor::uniform(&[6], 0.5, 1.5, &mut rng), true).unwrap();
        let den = store.add("d", Tensor::uniform(&[4], 1.0, 2.0, &mut rng), true).unwrap();
        let w = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let bn = tape.param(store, bias);
                let sn = tape.param(store, scales);
                let dn = tape.param(store, den);
                let xb = add_bias(tape, xn, bn)?;
                let xs = mul_channel(tape, xb, sn)?;
                let left = slice_cols(tape, xs, 0, 2)?;
                let right = slice_cols(tape, xs, 2, 4)?;
                let joined = concat_cols(tape, &[left, right])?;
                let divided = div_by_col(tape, joined, dn)?;
                let weighted = ops::mul_const(tape, divided, &w)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            64,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn slice_cols_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(slice_cols(&mut tape, x, 2, 2).is_err());
    }
}
