//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First-moment estimates, one per parameter in update order.
    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    /// Applies one update. `params` must be presented in the same order on
    /// every call. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>, &Tensor<T>)]) -> Result<()> {
        for (name, p, g) in params.iter() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p, _)| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, (_, p, _))| m.shape() != p.shape())
        {
            return Err(Error::InvalidArgument(
                "parameter set changed between Adam steps".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((m, v), (_, p, g)) in self.m.iter_mut().zip(self.v.iter_mut()).zip(params.iter_mut()) {
            let it = m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.data_mut())
                .zip(g.data());
            for (((mi, vi), pi), &gi) in it {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
