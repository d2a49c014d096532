//! Layer normalization over the trailing axis.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

/// Default variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Plain layer-norm kernel: normalizes each trailing-axis slice to zero mean
/// and unit variance (biased variance, epsilon inside the square root), then
/// applies the learned affine `gamma * xhat + beta`.
pub fn layer_norm_plain<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (out, _, _) = layer_norm_forward(x, gamma, beta, eps)?;
    Ok(out)
}

fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm", format!("eps must be positive, got {eps}")));
    }
    if x.rank() < 1 {
        return Err(Error::shape("layer_norm", "input must have rank >= 1"));
    }
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} must be [{d}]", gamma.shape(), beta.shape()),
        ));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let epsv = T::of(eps);
    let invd = T::one() / T::of(d as f64);

    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];

    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * invd;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * invd;
        let inv = T::one() / (var + epsv).sqrt();
        inv_std[r] = inv;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xh[c] = h;
            o[c] = gd[c] * h + bd[c];
        }
    }

    Ok((
        Tensor::new(x.shape(), out)?,
        Tensor::new(x.shape(), xhat)?,
        inv_std,
    ))
}

/// Differentiable layer normalization with learnable `gamma`/`beta` nodes.
pub fn layer_norm<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let (out, xhat, inv_std) =
        layer_norm_forward(tape.value(x), tape.value(gamma), tape.value(beta), eps)?;
    let gv = tape.value(gamma).clone();
    let needs = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
    Ok(tape.op(
        out,
        needs,
        Box::new(move |g, sink| {
            let d = *xhat.shape().last().unwrap();
            let rows = xhat.numel() / d;
            let gd = g.data();
            let xh = xhat.data();
            let gam = gv.data();
            let invd = T::one() / T::of(d as f64);

            let mut dx = vec![T::zero(); xhat.numel()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];

            for r in 0..rows {
                let grow = &gd[r * d..(r + 1) * d];
                let hrow = &xh[r * d..(r + 1) * d];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for c in 0..d {
                    let dh = grow[c] * gam[c];
                    mean_dh = mean_dh + dh;
                    mean_dh_h = mean_dh_h + dh * hrow[c];
                    dgamma[c] = dgamma[c] + grow[c] * hrow[c];
                    dbeta[c] = dbeta[c] + grow[c];
                }
                mean_dh = mean_dh * invd;
                mean_dh_h = mean_dh_h * invd;
                let inv = inv_std[r];
                let drow = &mut dx[r * d..(r + 1) * d];
                for c in 0..d {
                    let dh = grow[c] * gam[c];
                    drow[c] = inv * (dh - mean_dh - hrow[c] * mean_dh_h);
                }
            }

            sink.add(x, Tensor::new(xhat.shape(), dx).expect("shape"));
            sink.add(gamma, Tensor::new(&[d], dgamma).expect("shape"));
            sink.add(beta, Tensor::new(&[d], dbeta).expect("shape"));
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

    fn identity_affine(d: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[d], 1.0), Tensor::zeros(&[d]))
    }

    #[test]
    fn two_point_slice_normalizes_to_plus_minus_one() {
        let (g, b) = identity_affine(2);
        let x = Tensor::<f64>::from_f64s(&[2], &[1.0, -1.0]).unwrap();
        let y = layer_norm_plain(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_slice_maps_to_zero() {
        let (g, b) = identity_affine(4);
        let x = Tensor::<f64>::full(&[4], 3.7);
        let y = layer_norm_plain(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_slices_have_zero_mean_unit_variance() {
        let (g, b) = identity_affine(16);
        let mut rng = seeded_rng(77);
        let x = Tensor::<f64>::uniform(&[5, 16], -10.0, 10.0, &mut rng);
        let y = layer_norm_plain(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = &y.data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let (g, b) = identity_affine(2);
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(layer_norm_plain(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = seeded_rng(41);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::uniform(&[4, 8], -2.0, 2.0, &mut rng), true).unwrap();
        let gamma = store.add("gamma", Tensor::uniform(&[8], 0.5, 1.5, &mut rng), true).unwrap();
        let beta = store.add("beta", Tensor::uniform(&[8], -0.5, 0.5, &mut rng), true).unwrap();
        let w = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let report = check_gradient(
            &mut store,
            move |tape, store| {
                let xn = tape.param(store, x);
                let gn = tape.param(store, gamma);
                let bn = tape.param(store, beta);
                let y = layer_norm(tape, xn, gn, bn, LAYER_NORM_EPS)?;
                let weighted = ops::mul_const(tape, y, &w)?;
                ops::sum_all(tape, weighted)
            },
            DEFAULT_STEP,
            64,
            4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }
}
