//! Bias-corrected Adam update.

use super::tensor::Real;
use super::DiffError;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { t: 0, m: vec![T::zero(); len], v: vec![T::zero(); len], lr, beta1, beta2, eps }
    }

    /// One update step; increments `t` and mutates `params` in place.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<(), DiffError> {
        assert_eq!(params.len(), self.m.len(), "adam state length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(DiffError::NonFiniteGrad);
        }
        self.t += 1;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one = T::one();
        let corr1 = T::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of_f64(self.lr);
        let eps = T::of_f64(self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
