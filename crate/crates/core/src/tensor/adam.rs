//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::tensor::{Element, ParamStore};

/// Per-parameter first/second moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element = f32> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Adam optimizer; state is keyed by parameter name so a store can be
/// checkpointed and swapped without invalidating the optimizer.
#[derive(Debug, Clone)]
pub struct Adam<E: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    state: HashMap<String, AdamState<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter in the store.
    /// A trainable parameter without a populated gradient is a contract
    /// violation.
    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        let lr1 = E::from_f64(self.lr / bc1);
        let inv_sqrt_bc2 = E::from_f64(1.0 / bc2.sqrt());
        let eps = E::from_f64(self.epsilon);

        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let grad = p.tensor.grad().ok_or_else(|| {
                CoreError::Contract(format!(
                    "trainable parameter {:?} has no gradient at optimizer step",
                    p.name
                ))
            })?;
            if grad.len() != n {
                return Err(CoreError::Contract(format!(
                    "gradient length mismatch on {:?}",
                    p.name
                )));
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| AdamState {
                m: vec![E::ZERO; n],
                v: vec![E::ZERO; n],
            });
            if st.m.len() != n {
                return Err(CoreError::Contract(format!(
                    "optimizer state shape mismatch on {:?}",
                    p.name
                )));
            }
            let grad = grad.to_vec();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + one_m_b1 * g;
                st.v[i] = b2 * st.v[i] + one_m_b2 * g * g;
                let mhat_lr = lr1 * st.m[i];
                let vhat_sqrt = (st.v[i]).sqrt() * inv_sqrt_bc2;
                data[i] -= mhat_lr / (vhat_sqrt + eps);
            }
        }
        Ok(())
    }
}
