use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam hyperparameters. Only the learning rate is typically varied; the
/// moment decays and epsilon stay at the conventional defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state over a fixed parameter list. `step` consumes the
/// accumulated gradients and zeroes them afterwards.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Adam {
        Adam {
            cfg,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or(TensorError::MissingGrad { index: idx })?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.data();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            p.set_data(data)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn single_step_descends_quadratic() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), std::slice::from_ref(&w));
        let loss = w.mul(&w).unwrap().sum();
        backward(&loss).unwrap();
        opt.step(std::slice::from_ref(&w)).unwrap();
        assert!(w.item() < 1.0);
        assert!(w.grad().is_none(), "step must zero the gradient");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let w = Tensor::param(vec![0.5, -0.25], &[2]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), std::slice::from_ref(&w));
        w.accumulate_grad(&[0.0, 0.0]);
        opt.step(std::slice::from_ref(&w)).unwrap();
        assert_eq!(w.data(), vec![0.5, -0.25]);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), std::slice::from_ref(&w));
        let err = opt.step(std::slice::from_ref(&w)).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad { index: 0 }));
    }

    #[test]
    fn two_hundred_steps_reach_quadratic_minimum() {
        // Closed-form minimum of f(w) = w0^2 + w1^2 is 0 at the origin.
        let w = Tensor::param(vec![1.0, -0.7], &[2]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), std::slice::from_ref(&w));
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let loss = w.mul(&w).unwrap().sum();
            last = loss.item();
            backward(&loss).unwrap();
            opt.step(std::slice::from_ref(&w)).unwrap();
        }
        assert!(last < 1e-3, "loss after 200 steps was {last}");
    }
}
