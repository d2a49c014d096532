//! Group-wise feature correlation and depth-axis stacking.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Plain group-wise correlation between two feature maps `[C, H, W]`.
///
/// Channels are split into `groups` contiguous bands; each band contributes
/// the mean-scaled inner product `(groups / C) * <ref_g, src_g>` per pixel.
/// Output is `[groups, H, W]`.
pub fn group_correlate_plain<T: Real>(
    reference: &Tensor<T>,
    source: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    if reference.rank() != 3 || source.rank() != 3 {
        return Err(Error::shape(
            "group_correlate",
            format!("expected [C,H,W] pairs, got {:?} and {:?}", reference.shape(), source.shape()),
        ));
    }
    if reference.shape() != source.shape() {
        return Err(Error::shape(
            "group_correlate",
            format!("mismatched shapes {:?} vs {:?}", reference.shape(), source.shape()),
        ));
    }
    let c = reference.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_correlate",
            format!("channels {c} must split evenly into {groups} groups"),
        ));
    }
    let per = c / groups;
    let hw = reference.shape()[1] * reference.shape()[2];
    let scale = T::of(groups as f64 / c as f64);
    let rd = reference.data();
    let sd = source.data();
    let mut out = vec![T::zero(); groups * hw];
    for g in 0..groups {
        let base = g * per * hw;
        let og = &mut out[g * hw..(g + 1) * hw];
        for ch in 0..per {
            let cb = base + ch * hw;
            let r = &rd[cb..cb + hw];
            let s = &sd[cb..cb + hw];
            for p in 0..hw {
                og[p] = og[p] + r[p] * s[p];
            }
        }
        for v in og.iter_mut() {
            *v = *v * scale;
        }
    }
    Tensor::new(&[groups, reference.shape()[1], reference.shape()[2]], out)
}

/// Differentiable group-wise correlation.
pub fn group_correlate<T: Real>(
    tape: &mut Tape<T>,
    reference: NodeId,
    source: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let rv = tape.value(reference).clone();
    let sv = tape.value(source).clone();
    let out = group_correlate_plain(&rv, &sv, groups)?;
    let needs = tape.needs_grad(reference) || tape.needs_grad(source);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let c = rv.shape()[0];
            let per = c / groups;
            let hw = rv.shape()[1] * rv.shape()[2];
            let scale = T::of(groups as f64 / c as f64);
            let gd = g.data();
            let rd = rv.data();
            let sd = sv.data();
            let mut dr = vec![T::zero(); rv.numel()];
            let mut ds = vec![T::zero(); sv.numel()];
            for gi in 0..groups {
                let gg = &gd[gi * hw..(gi + 1) * hw];
                for ch in 0..per {
                    let cb = (gi * per + ch) * hw;
                    for p in 0..hw {
                        let gs = gg[p] * scale;
                        dr[cb + p] = dr[cb + p] + gs * sd[cb + p];
                        ds[cb + p] = ds[cb + p] + gs * rd[cb + p];
                    }
                }
            }
            sink.add(reference, Tensor::new(rv.shape(), dr).expect("shape"));
            sink.add(source, Tensor::new(sv.shape(), ds).expect("shape"));
        }),
    ))
}

/// Plain stack of `D` maps `[G, H, W]` into a volume `[G, D, H, W]`.
pub fn stack_depth_plain<T: Real>(slices: &[Tensor<T>]) -> Result<Tensor<T>> {
    if slices.is_empty() {
        return Err(Error::invalid("stack_depth", "need at least one slice"));
    }
    let shape = slices[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("stack_depth", format!("expected [G,H,W] slices, got {:?}", shape)));
    }
    for (i, s) in slices.iter().enumerate() {
        if s.shape() != shape {
            return Err(Error::shape(
                "stack_depth",
                format!("slice {i} shape {:?} differs from {:?}", s.shape(), shape),
            ));
        }
    }
    let (g, h, w) = (shape[0], shape[1], shape[2]);
    let d = slices.len();
    let hw = h * w;
    let mut out = vec![T::zero(); g * d * hw];
    for (di, s) in slices.iter().enumerate() {
        let sd = s.data();
        for gi in 0..g {
            let dst = (gi * d + di) * hw;
            out[dst..dst + hw].copy_from_slice(&sd[gi * hw..(gi + 1) * hw]);
        }
    }
    Tensor::new(&[g, d, h, w], out)
}

/// Differentiable stack along a new depth axis.
pub fn stack_depth<T: Real>(tape: &mut Tape<T>, slices: &[NodeId]) -> Result<NodeId> {
    let values: Vec<Tensor<T>> = slices.iter().map(|&n| tape.value(n).clone()).collect();
    let out = stack_depth_plain(&values)?;
    let ids: Vec<NodeId> = slices.to_vec();
    let needs = ids.iter().any(|&n| tape.needs_grad(n));
    let slice_shape = values[0].shape().to_vec();
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let (gc, h, w) = (slice_shape[0], slice_shape[1], slice_shape[2]);
            let d = ids.len();
            let hw = h * w;
            let gd = g.data();
            for (di, &id) in ids.iter().enumerate() {
                let mut dv = vec![T::zero(); gc * hw];
                for gi in 0..gc {
                    let src = (gi * d + di) * hw;
                    dv[gi * hw..(gi + 1) * hw].copy_from_slice(&gd[src..src + hw]);
                }
                sink.add(id, Tensor::new(&slice_shape, dv).expect("shape"));
            }
        }),
    ))
}
