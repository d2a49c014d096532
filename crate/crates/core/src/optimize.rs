//! First-order optimizers over a parameter store.

use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with bias-corrected moment estimates.
///
/// Moment buffers are keyed by parameter insertion order and sized lazily on
/// the first step, so the optimizer can be constructed before the store is
/// fully populated. Frozen parameters are skipped entirely: their moments stay
/// empty and their values are never touched.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let n = store.len();
        if self.first.len() < n {
            self.first.resize(n, None);
            self.second.resize(n, None);
        }
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.epsilon);
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));

        for idx in 0..n {
            let param = store.by_index_mut(idx);
            if !param.trainable {
                continue;
            }
            if !param.grad.is_all_finite() {
                return Err(Error::non_finite("adam", format!("gradient of '{}'", param.name)));
            }
            let m = self.first[idx].get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            let v = self.second[idx].get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            let gd = param.grad.data().to_vec();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.value.data_mut();
            for i in 0..gd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
