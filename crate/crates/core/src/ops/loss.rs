//! Classification-style depth supervision over hypothesis bins.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Plain cross-entropy over the depth axis of a logit volume `[D, H, W]`.
///
/// `targets[p]` holds the index of the correct hypothesis bin for pixel `p`
/// (row-major over `H*W`), or `-1` for pixels excluded from supervision
/// (no ground truth, or ground truth outside the swept window). Returns the
/// mean negative log-likelihood over supervised pixels together with the
/// supervised-pixel count. Errors if no pixel is supervised.
pub fn cross_entropy_depth_plain<T: Real>(
    logits: &Tensor<T>,
    targets: &[i32],
) -> Result<(T, usize)> {
    if logits.rank() != 3 {
        return Err(Error::shape(
            "cross_entropy_depth",
            format!("expected [D,H,W] logits, got {:?}", logits.shape()),
        ));
    }
    let d = logits.shape()[0];
    let hw = logits.shape()[1] * logits.shape()[2];
    if targets.len() != hw {
        return Err(Error::shape(
            "cross_entropy_depth",
            format!("targets length {} != pixel count {hw}", targets.len()),
        ));
    }
    let ld = logits.data();
    let mut total = T::zero();
    let mut count = 0usize;
    for p in 0..hw {
        let t = targets[p];
        if t < 0 {
            continue;
        }
        let t = t as usize;
        if t >= d {
            return Err(Error::invalid(
                "cross_entropy_depth",
                format!("target bin {t} out of range for {d} hypotheses"),
            ));
        }
        // log-sum-exp with max subtraction, reading the pixel's depth column.
        let mut mx = ld[p];
        for di in 1..d {
            let v = ld[di * hw + p];
            if v > mx {
                mx = v;
            }
        }
        if !mx.is_finite() {
            return Err(Error::non_finite("cross_entropy_depth", "non-finite logit"));
        }
        let mut sum = T::zero();
        for di in 0..d {
            sum = sum + (ld[di * hw + p] - mx).exp();
        }
        let lse = mx + sum.ln();
        total = total + (lse - ld[t * hw + p]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(
            "cross_entropy_depth",
            "no supervised pixels: every target is masked out",
        ));
    }
    Ok((total / T::of(count as f64), count))
}

/// Differentiable mean cross-entropy over depth bins. Produces a scalar node.
pub fn cross_entropy_depth<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[i32],
) -> Result<NodeId> {
    let lv = tape.value(logits).clone();
    let (loss, count) = cross_entropy_depth_plain(&lv, targets)?;
    let targets_owned = targets.to_vec();
    let needs = tape.needs_grad(logits);
    Ok(tape.op(
        Tensor::scalar(loss),
        needs,
        Box::new(move |g, sink| {
            let gs = g.data()[0];
            let d = lv.shape()[0];
            let hw = lv.shape()[1] * lv.shape()[2];
            let ld = lv.data();
            let inv = T::of(1.0 / count as f64);
            let mut dl = vec![T::zero(); lv.numel()];
            for p in 0..hw {
                let t = targets_owned[p];
                if t < 0 {
                    continue;
                }
                let t = t as usize;
                let mut mx = ld[p];
                for di in 1..d {
                    let v = ld[di * hw + p];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for di in 0..d {
                    sum = sum + (ld[di * hw + p] - mx).exp();
                }
                for di in 0..d {
                    let soft = (ld[di * hw + p] - mx).exp() / sum;
                    let one = if di == t { T::one() } else { T::zero() };
                    dl[di * hw + p] = gs * inv * (soft - one);
                }
            }
            sink.add(logits, Tensor::new(lv.shape(), dl).expect("shape"));
        }),
    ))
}
