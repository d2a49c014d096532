//! Elementwise arithmetic ops.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Elementwise sum of two same-shape nodes.
pub fn add<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let out = tape.value(a).zip_map(tape.value(b), "add", |x, y| x + y)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        }),
    ))
}

/// Elementwise difference `a - b`.
pub fn sub<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let out = tape.value(a).zip_map(tape.value(b), "sub", |x, y| x - y)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.map(|v| -v));
        }),
    ))
}

/// Elementwise product of two same-shape nodes.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let out = av.zip_map(&bv, "mul", |x, y| x * y)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(a, g.zip_map(&bv, "mul_bwd", |gv, y| gv * y).expect("shape"));
            sink.add(b, g.zip_map(&av, "mul_bwd", |gv, x| gv * x).expect("shape"));
        }),
    ))
}

/// Multiplies a node by a compile-time-known constant.
pub fn scale<T: Real>(tape: &mut Tape<T>, a: NodeId, c: f64) -> Result<NodeId> {
    let cv = T::of(c);
    let out = tape.value(a).map(|x| x * cv);
    let needs = tape.needs_grad(a);
    Ok(tape.op(out, needs, Box::new(move |g, sink| sink.add(a, g.map(|v| v * cv)))))
}

/// Adds a scalar constant to every element.
pub fn add_scalar<T: Real>(tape: &mut Tape<T>, a: NodeId, c: f64) -> Result<NodeId> {
    let cv = T::of(c);
    let out = tape.value(a).map(|x| x + cv);
    let needs = tape.needs_grad(a);
    Ok(tape.op(out, needs, Box::new(move |g, sink| sink.add(a, g.clone()))))
}

/// Elementwise product with a constant tensor (no gradient into the constant).
/// Reinterprets `x` with a new shape of equal element count; zero-copy.
pub fn reshape<T: Real>(tape: &mut Tape<T>, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
    let old_shape = tape.value(x).shape().to_vec();
    let out = tape.value(x).reshaped(new_shape)?;
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(x, g.reshaped(&old_shape).expect("reshape grad"));
        }),
    ))
}

pub fn mul_const<T: Real>(tape: &mut Tape<T>, a: NodeId, k: &Tensor<T>) -> Result<NodeId> {
    let out = tape.value(a).zip_map(k, "mul_const", |x, y| x * y)?;
    let needs = tape.needs_grad(a);
    let k = k.clone();
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            sink.add(a, g.zip_map(&k, "mul_const_bwd", |gv, y| gv * y).expect("shape"));
        }),
    ))
}

/// Elementwise sum with a constant tensor (no gradient into the constant).
pub fn add_const<T: Real>(tape: &mut Tape<T>, a: NodeId, k: &Tensor<T>) -> Result<NodeId> {
    let out = tape.value(a).zip_map(k, "add_const", |x, y| x + y)?;
    let needs = tape.needs_grad(a);
    Ok(tape.op(out, needs, Box::new(move |g, sink| sink.add(a, g.clone()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::tape::ParamStore;
    use crate::tensor::seeded_rng;

    #[test]
    fn add_and_mul_forward_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64s(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_f64s(&[3], &[10.0, 20.0, 30.0]).unwrap());
        let s = add(&mut tape, a, b).unwrap();
        let p = mul(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 33.0]);
        assert_eq!(tape.value(p).data(), &[10.0, 40.0, 90.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(add(&mut tape, a, b).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(11);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[6], -1.0, 1.0, &mut rng), true).unwrap();
        let y = store.add("y", Tensor::uniform(&[6], -1.0, 1.0, &mut rng), true).unwrap();
        let k = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let yn = tape.param(store, y);
                let s = add(tape, xn, yn)?;
                let d = sub(tape, s, yn)?;
                let m = mul(tape, d, yn)?;
                let sc = scale(tape, m, 1.7)?;
                let sh = add_scalar(tape, sc, 0.3)?;
                let mc = mul_const(tape, sh, &k)?;
                let ac = add_const(tape, mc, &k)?;
                crate::ops::sum_all(tape, ac)
            },
            DEFAULT_STEP,
            64,
            3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }
}
