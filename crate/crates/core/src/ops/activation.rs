//! Pointwise nonlinearities and the scaled softmax.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Gaussian error linear unit (tanh approximation), elementwise.
pub fn gelu_plain<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    x.map(|v| {
        let u = c * (v + a * v * v * v);
        half * v * (T::one() + u.tanh())
    })
}

/// Differentiable GELU.
pub fn gelu<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let out = gelu_plain(&xv);
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let c = T::of(GELU_SQRT_2_OVER_PI);
            let a = T::of(GELU_CUBIC);
            let half = T::of(0.5);
            let three = T::of(3.0);
            let dx = g
                .zip_map(&xv, "gelu_bwd", |gv, v| {
                    let u = c * (v + a * v * v * v);
                    let t = u.tanh();
                    let sech2 = T::one() - t * t;
                    let du = c * (T::one() + three * a * v * v);
                    gv * (half * (T::one() + t) + half * v * sech2 * du)
                })
                .expect("shape");
            sink.add(x, dx);
        }),
    ))
}

/// Positive feature map for kernelized attention: `x+1` for `x > 0`, `exp(x)`
/// otherwise. Continuous, strictly positive, with continuous derivative.
pub fn elu_feature_map_plain<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v + T::one() } else { v.exp() })
}

/// Differentiable positive feature map.
pub fn elu_feature_map<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x).clone();
    let out = elu_feature_map_plain(&xv);
    let needs = tape.needs_grad(x);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let dx = g
                .zip_map(&xv, "elu_feature_map_bwd", |gv, v| {
                    if v > T::zero() {
                        gv
                    } else {
                        gv * v.exp()
                    }
                })
                .expect("shape");
            sink.add(x, dx);
        }),
    ))
}

/// Softmax of `scale * logits` along the trailing axis, with max subtraction
/// for overflow safety. Rows of the result sum to 1 for any finite input.
pub fn softmax_scaled_plain<T: Real>(logits: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    logits.ensure_finite("softmax_scaled")?;
    if logits.rank() < 1 {
        return Err(Error::shape("softmax_scaled", "input must have rank >= 1"));
    }
    let d = *logits.shape().last().unwrap();
    if d == 0 {
        return Err(Error::shape("softmax_scaled", "trailing axis is empty"));
    }
    let rows = logits.numel() / d;
    let s = T::of(scale);
    let ld = logits.data();
    let mut out = vec![T::zero(); logits.numel()];
    for r in 0..rows {
        let row = &ld[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
        let mut max = row[0] * s;
        for &v in row.iter().skip(1) {
            let sv = v * s;
            if sv > max {
                max = sv;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v * s - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Differentiable scaled softmax along the trailing axis.
pub fn softmax_scaled<T: Real>(tape: &mut Tape<T>, logits: NodeId, scale: f64) -> Result<NodeId> {
    let out = softmax_scaled_plain(tape.value(logits), scale)?;
    let probs = out.clone();
    let needs = tape.needs_grad(logits);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let d = *probs.shape().last().unwrap();
            let rows = probs.numel() / d;
            let s = T::of(scale);
            let gd = g.data();
            let pd = probs.data();
            let mut dx = vec![T::zero(); probs.numel()];
            for r in 0..rows {
                let grow = &gd[r * d..(r + 1) * d];
                let prow = &pd[r * d..(r + 1) * d];
                let mut dot = T::zero();
                for (&gv, &pv) in grow.iter().zip(prow.iter()) {
                    dot = dot + gv * pv;
                }
                let drow = &mut dx[r * d..(r + 1) * d];
                for ((o, &gv), &pv) in drow.iter_mut().zip(grow.iter()).zip(prow.iter()) {
                    *o = s * pv * (gv - dot);
                }
            }
            sink.add(logits, Tensor::new(probs.shape(), dx).expect("shape"));
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
    fn softmax_matches_direct_evaluation() {
        // Oracle: softmax(0.5 * [1, 2, 3]) computed by direct exp/sum.
        let logits = Tensor::<f64>::from_f64s(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let p = softmax_scaled_plain(&logits, 0.5).unwrap();
        let e: Vec<f64> = [0.5, 1.0, 1.5].iter().map(|&v: &f64| v.exp()).collect();
        let sum: f64 = e.iter().sum();
        for (got, want) in p.data().iter().zip(e.iter().map(|v| v / sum)) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_handles_large_magnitudes() {
        let logits = Tensor::<f64>::from_f64s(&[2], &[1000.0, 0.0]).unwrap();
        let p = softmax_scaled_plain(&logits, 1.0).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded_rng(9);
        let logits = Tensor::<f64>::uniform(&[7, 11], -30.0, 30.0, &mut rng);
        let p = softmax_scaled_plain(&logits, 1.3).unwrap();
        for r in 0..7 {
            let s: f64 = p.data()[r * 11..(r + 1) * 11].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_rejects_nan_input() {
        let logits = Tensor::<f64>::from_f64s(&[2], &[f64::NAN, 0.0]).unwrap();
        assert!(softmax_scaled_plain(&logits, 1.0).is_err());
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = seeded_rng(31);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng), true).unwrap();
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let ge = gelu(tape, xn)?;
                let el = elu_feature_map(tape, ge)?;
                let sm = softmax_scaled(tape, el, 0.7)?;
                let weighted = ops::mul_const(tape, sm, &w)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            64,
            2,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn elu_feature_map_is_strictly_positive() {
        let mut rng = seeded_rng(2);
        let x = Tensor::<f64>::uniform(&[64], -10.0, 10.0, &mut rng);
        let y = elu_feature_map_plain(&x);
        assert!(y.data().iter().all(|&v| v > 0.0));
    }
}
