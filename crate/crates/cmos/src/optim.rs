//! Parameter update rules: SGD with momentum, and Adam.
//!
//! State (velocities / moment estimates) is kept per parameter index and
//! persists between steps, so one optimizer instance drives one training
//! phase over a fixed parameter list.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> OptimizerKind {
        OptimizerKind::SgdMomentum { momentum }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Reject non-finite gradients instead of applying them.
    pub checked: bool,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr,
            checked: true,
        }
    }
}

struct ParamState<T: Scalar> {
    velocity: Vec<T>,
    second: Vec<T>,
}

pub struct Optimizer<T: Scalar> {
    config: OptimizerConfig,
    state: Vec<ParamState<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Optimizer<T>> {
        if config.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(Optimizer {
            config,
            state: Vec::new(),
            steps: 0,
        })
    }

    /// Applies one update. `params` and `grads` are aligned; the name is used
    /// in diagnostics. State is sized on first call and must keep the same
    /// parameter list afterwards.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor<T>)],
        grads: &[Tensor<T>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|(_, p)| ParamState {
                    velocity: vec![T::ZERO; p.numel()],
                    second: vec![T::ZERO; p.numel()],
                })
                .collect();
        } else if self.state.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state holds {} params, got {}",
                self.state.len(),
                params.len()
            )));
        }
        if self.config.checked {
            for ((name, _), grad) in params.iter().zip(grads) {
                if !grad.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        self.steps += 1;
        let lr = T::from_f64(self.config.lr);
        match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = T::from_f64(momentum);
                for (((_, param), grad), st) in
                    params.iter_mut().zip(grads).zip(&mut self.state)
                {
                    for ((p, &g), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(&mut st.velocity)
                    {
                        *v = mu * *v + g;
                        *p = *p - lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = T::from_f64(beta1);
                let b2 = T::from_f64(beta2);
                let e = T::from_f64(eps);
                let corr1 = T::from_f64(1.0 - beta1.powi(self.steps as i32));
                let corr2 = T::from_f64(1.0 - beta2.powi(self.steps as i32));
                for (((_, param), grad), st) in
                    params.iter_mut().zip(grads).zip(&mut self.state)
                {
                    for (((p, &g), m), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(&mut st.velocity)
                        .zip(&mut st.second)
                    {
                        *m = b1 * *m + (T::ONE - b1) * g;
                        *v = b2 * *v + (T::ONE - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + e);
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

    fn one_param(value: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![value])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt =
            Optimizer::new(OptimizerConfig::new(OptimizerKind::sgd(0.0), 0.1)).unwrap();
        let mut p = one_param(0.75);
        opt.step(&mut [("p", &mut p)], &[one_param(0.0)]).unwrap();
        assert_eq!(p.data(), &[0.75]);
    }

    #[test]
    fn sgd_single_step() {
        let mut opt =
            Optimizer::new(OptimizerConfig::new(OptimizerKind::sgd(0.0), 0.1)).unwrap();
        let mut p = one_param(0.0);
        opt.step(&mut [("p", &mut p)], &[one_param(1.0)]).unwrap();
        assert!((p.data()[0] - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn adam_single_step_matches_hand_recurrence() {
        // m=0.1, v=0.001, m_hat=1, v_hat=1 -> step = lr / (1 + eps).
        let mut opt = Optimizer::new(OptimizerConfig::new(
            OptimizerKind::adam_default(),
            1e-3,
        ))
        .unwrap();
        let mut p = one_param(0.0);
        opt.step(&mut [("p", &mut p)], &[one_param(1.0)]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!(
            (p.data()[0] - expected).abs() < 1e-12,
            "got {}",
            p.data()[0]
        );
    }

    #[test]
    fn checked_mode_rejects_non_finite_gradient() {
        let mut opt = Optimizer::new(OptimizerConfig::new(
            OptimizerKind::adam_default(),
            1e-3,
        ))
        .unwrap();
        let mut p = one_param(0.0);
        let err = opt
            .step(&mut [("conv1.kernel", &mut p)], &[one_param(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("conv1.kernel"));
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt =
            Optimizer::new(OptimizerConfig::new(OptimizerKind::sgd(0.9), 1.0)).unwrap();
        let mut p = one_param(0.0);
        opt.step(&mut [("p", &mut p)], &[one_param(1.0)]).unwrap();
        opt.step(&mut [("p", &mut p)], &[one_param(1.0)]).unwrap();
        // v1 = 1, v2 = 1.9 -> p = -(1 + 1.9) = -2.9.
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
    }
}
