use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// Applies one update. Fails without touching anything if a shape differs
    /// or any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam tensor count",
                &[self.m.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape("adam parameter", m.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [3.0, -0.02] {
            let mut w = scalar(1.0);
            let mut adam = AdamState::new(0.01, &[&[1]]);
            adam.step(&mut [&mut w], &[&scalar(g)]).unwrap();
            let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - w.data()[0]).abs() - expected).abs() < 1e-15);
            assert_eq!((1.0 - w.data()[0]).signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = scalar(0.7);
        let mut adam = AdamState::new(0.1, &[&[1]]);
        for _ in 0..50 {
            adam.step(&mut [&mut w], &[&scalar(0.0)]).unwrap();
        }
        assert_eq!(w.data()[0], 0.7);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut w = scalar(1.0);
        let mut adam = AdamState::new(0.1, &[&[1]]);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = scalar(2.0 * w.data()[0]);
            adam.step(&mut [&mut w], &[&g]).unwrap();
            let now = w.data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = scalar(1.0);
        let mut adam = AdamState::new(0.1, &[&[1]]);
        assert!(adam.step(&mut [&mut w], &[&scalar(f64::NAN)]).is_err());
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }
}
