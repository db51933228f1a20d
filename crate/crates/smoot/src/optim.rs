//! Parameter update rules: plain SGD and Adadelta.

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
}

/// Adadelta decay of the squared-gradient and squared-update averages.
pub const ADADELTA_RHO: f64 = 0.9;
pub const ADADELTA_EPS: f64 = 1e-6;

pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    lr: T,
    rho: T,
    eps: T,
    /// Per parameter: (E[g²], E[Δ²]) accumulators, lazily sized.
    accum: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr: T::from_f64(lr),
            rho: T::from_f64(ADADELTA_RHO),
            eps: T::from_f64(ADADELTA_EPS),
            accum: Vec::new(),
        }
    }

    /// Repoints the step scale; used by per-epoch decay schedules.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64(lr);
    }

    /// One update over a parameter list. `grads[i]` may be `None` when no
    /// gradient reached that parameter this step (treated as zero).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "optimizer: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != params[i].shape() {
                return Err(Error::Shape(format!(
                    "optimizer: grad shape {:?} vs param {:?}",
                    grad.shape(),
                    params[i].shape()
                )));
            }
            if grad.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!(
                    "optimizer: NaN gradient in parameter {i}"
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in params[i].data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adadelta => {
                    while self.accum.len() <= i {
                        let shape = params[self.accum.len()].shape().to_vec();
                        self.accum
                            .push((Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
                    }
                    let (eg2, ed2) = &mut self.accum[i];
                    let one_minus_rho = T::ONE - self.rho;
                    for (((p, &g), a), u) in params[i]
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(eg2.data_mut())
                        .zip(ed2.data_mut())
                    {
                        *a = self.rho * *a + one_minus_rho * g * g;
                        let delta = -((*u + self.eps).sqrt() / (*a + self.eps).sqrt()) * g;
                        *u = self.rho * *u + one_minus_rho * delta * delta;
                        *p += self.lr * delta;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn sgd_direct_update() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut params = [scalar_param(1.0)];
        let g = Tensor::scalar(2.0);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        assert_eq!(params[0].data()[0], 0.8);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adadelta] {
            let mut opt = Optimizer::new(kind, 1.0);
            let mut params = [scalar_param(0.5)];
            let g = Tensor::scalar(0.0);
            opt.step(&mut params, &[Some(&g)]).unwrap();
            assert_eq!(params[0].data()[0], 0.5);
        }
    }

    #[test]
    fn adadelta_first_step_matches_recurrence() {
        // E[g²] = 0.1·g², Δ = -√(ε/(E[g²]+ε))·g with τ=1
        let mut opt = Optimizer::new(OptimizerKind::Adadelta, 1.0);
        let mut params = [scalar_param(0.0)];
        let g = Tensor::scalar(1.0);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        let expected = -(ADADELTA_EPS / (0.1 + ADADELTA_EPS)).sqrt();
        assert!((params[0].data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = Optimizer::new(OptimizerKind::Adadelta, 1.0);
        let mut params = [scalar_param(0.0)];
        let g = Tensor::scalar(f64::NAN);
        assert!(matches!(
            opt.step(&mut params, &[Some(&g)]),
            Err(Error::Numeric(_))
        ));
    }
}
