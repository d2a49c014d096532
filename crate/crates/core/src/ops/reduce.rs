//! Reduction ops.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Sum of all elements, producing a scalar node.
pub fn sum_all<T: Real>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
    let av = tape.value(a);
    let mut acc = T::zero();
    for &v in av.data() {
        acc = acc + v;
    }
    let shape = av.shape().to_vec();
    let needs = tape.needs_grad(a);
    Ok(tape.op(
        Tensor::scalar(acc),
        needs,
        Box::new(move |g, sink| {
            let gv = g.data()[0];
            sink.add(a, Tensor::full(&shape, gv));
        }),
    ))
}

/// Mean of all elements, producing a scalar node.
pub fn mean_all<T: Real>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
    let n = tape.value(a).numel();
    if n == 0 {
        return Err(Error::invalid("mean_all", "empty tensor"));
    }
    let s = sum_all(tape, a)?;
    crate::ops::scale(tape, s, 1.0 / n as f64)
}

/// Plain sum over the leading axis: `[n, rest...] -> [rest...]`.
pub fn sum_axis0_plain<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 1 {
        return Err(Error::shape("sum_axis0", "input must have rank >= 1"));
    }
    let n = a.shape()[0];
    let rest: Vec<usize> = a.shape()[1..].to_vec();
    let inner: usize = rest.iter().product();
    let mut out = vec![T::zero(); inner];
    let data = a.data();
    for r in 0..n {
        let row = &data[r * inner..(r + 1) * inner];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = *o + v;
        }
    }
    Tensor::new(&rest, out)
}

/// Sums over the leading axis: `[n, rest...] -> [rest...]`.
pub fn sum_axis0<T: Real>(tape: &mut Tape<T>, a: NodeId) -> Result<NodeId> {
    let av = tape.value(a);
    let n = av.shape().first().copied().unwrap_or(0);
    let rest: Vec<usize> = av.shape().get(1..).unwrap_or(&[]).to_vec();
    let inner: usize = rest.iter().product();
    let out = sum_axis0_plain(av)?;
    let needs = tape.needs_grad(a);
    let full_shape: Vec<usize> = std::iter::once(n).chain(rest.iter().copied()).collect();
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let gd = g.data();
            let mut tiled = vec![T::zero(); n * inner];
            for r in 0..n {
                tiled[r * inner..(r + 1) * inner].copy_from_slice(gd);
            }
            sink.add(a, Tensor::new(&full_shape, tiled).expect("shape"));
        }),
    ))
}
