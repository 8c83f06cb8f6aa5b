//! RMSprop with iteration-based learning-rate decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState<T> {
    pub accumulators: Vec<Tensor<T>>,
    pub rho: f64,
    pub base_lr: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl<T: Real> RmspropState<T> {
    /// rho 0.9, learning rate 1e-3, decay 1e-4, epsilon 1e-7.
    pub fn new(params: &ParameterStore<T>) -> Self {
        Self::with_hyper(params, 0.9, 1e-3, 1e-4, 1e-7)
    }

    pub fn with_hyper(params: &ParameterStore<T>, rho: f64, base_lr: f64, decay: f64, epsilon: f64) -> Self {
        RmspropState {
            accumulators: params
                .trainable()
                .map(|e| Tensor::zeros_like_shape(e.value.shape()))
                .collect(),
            rho,
            base_lr,
            decay,
            epsilon,
            step: 0,
        }
    }

    /// Learning rate of the next step: `base_lr / (1 + decay * step)`.
    pub fn learning_rate(&self) -> f64 {
        self.base_lr / (1.0 + self.decay * self.step as f64)
    }

    /// One update of every trainable parameter; `grads` follows store order.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.accumulators.len() {
            return Err(Error::Config(alloc::format!(
                "optimizer holds {} accumulators but got {} gradients",
                self.accumulators.len(),
                grads.len()
            )));
        }
        let rho = T::of(self.rho);
        let keep = T::one() - rho;
        let lr = T::of(self.learning_rate());
        let eps = T::of(self.epsilon);
        for ((entry, acc), g) in params.trainable_mut().zip(&mut self.accumulators).zip(grads) {
            if entry.value.shape() != g.shape() || acc.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "rmsprop",
                    lhs: entry.value.shape(),
                    rhs: g.shape(),
                });
            }
            for ((p, a), &gv) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(acc.data_mut())
                .zip(g.data())
            {
                *a = rho * *a + keep * gv * gv;
                *p -= lr * gv / (a.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store(value: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", ParamKind::Trainable, Tensor::full(&[3], value).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_accumulator() {
        let mut p = store(0.5);
        let mut opt = RmspropState::new(&p);
        opt.accumulators[0] = Tensor::full(&[3], 2.0).unwrap();
        opt.step(&mut p, &[Tensor::zeros(&[3]).unwrap()]).unwrap();
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 0.5));
        assert!(opt.accumulators[0].data().iter().all(|&a| (a - 1.8).abs() < 1e-15));
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = store(0.0);
        let mut opt = RmspropState::new(&p);
        opt.step(&mut p, &[Tensor::full(&[3], 1.0).unwrap()]).unwrap();
        let expected = 1e-3 / (0.1f64.sqrt() + 1e-7);
        for (&a, &w) in opt.accumulators[0].data().iter().zip(p.get("w").unwrap().data()) {
            assert!((a - 0.1).abs() < 1e-15);
            assert!((w + expected).abs() < 1e-15);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn decay_schedule_halves_after_ten_thousand_steps() {
        let p = store(0.0);
        let mut opt = RmspropState::new(&p);
        opt.step = 10_000;
        assert!((opt.learning_rate() - 0.0005).abs() < 1e-15);
    }
}
