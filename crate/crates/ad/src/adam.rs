//! Adam optimizer with bias correction.

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, param_shapes: &[Vec<usize>]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over all parameters; shapes must agree pairwise.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AdError::Contract(format!(
                "adam_step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(AdError::Shape(format!(
                    "adam_step: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam = AdamState::new(1e-3, &[vec![3]]);
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::zeros(&[3])];
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Hand evaluation at step 1: m=0.1, v=0.001, mhat=1, vhat=1,
        // update = lr * 1 / (1 + eps) ~= lr.
        let mut adam = AdamState::new(1e-4, &[vec![1]]);
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let grads = vec![Tensor::from_vec(vec![1.0])];
        adam.step(&mut params, &grads).unwrap();
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_positive_gradient_descends_monotonically() {
        let mut adam = AdamState::new(1e-2, &[vec![1]]);
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let grads = vec![Tensor::from_vec(vec![0.7])];
        let p0 = params[0].data()[0];
        adam.step(&mut params, &grads).unwrap();
        let p1 = params[0].data()[0];
        adam.step(&mut params, &grads).unwrap();
        let p2 = params[0].data()[0];
        assert!(p1 < p0 && p2 < p1);
    }
}
