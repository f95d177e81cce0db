//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, AmdError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T: Real = f64> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(dim_err!(
                "adam: params {} grads {} state {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            ));
        }
        if !(lr > T::zero()) {
            return Err(AmdError::Config(format!("learning rate {} must be positive", lr)));
        }
        self.step += 1;
        let one = T::one();
        let t = self.step as i32;
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Adam<T: Real = f64> {
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Adam {
            states: params.into_iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    /// Applies one step using each tensor's accumulated gradient, then clears it.
    /// Tensors without a gradient are treated as having a zero gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, lr: T) -> Result<()> {
        let mut n = 0;
        for (p, st) in params.into_iter().zip(self.states.iter_mut()) {
            let g = p
                .grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.len()]);
            st.step(p.data_mut(), &g, lr)?;
            p.zero_grad();
            n += 1;
        }
        if n != self.states.len() {
            return Err(dim_err!("adam built for {} tensors, got {}", self.states.len(), n));
        }
        Ok(())
    }
}
