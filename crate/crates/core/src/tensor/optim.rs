//! Momentum SGD with L2 weight decay.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::Contract(format!(
                "learning rate must be a finite non-negative real, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::Contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TensorError::Contract(format!(
                "weight decay must be a finite non-negative real, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer with one momentum buffer per parameter, matched positionally;
/// buffers start at zero on the first step.
pub struct SgdOptimizer {
    config: SgdConfig,
    buffers: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(config: SgdConfig) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(SgdOptimizer { config, buffers: Vec::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// One update per parameter:
    /// `g = grad + wd * p; buf = momentum * buf + g; p -= lr * buf`.
    /// Parameters with no accumulated gradient contribute `grad = 0`.
    /// The same parameter slice (in the same order) must be passed on every
    /// step so buffers stay aligned.
    pub fn step(&mut self, params: &[&Tensor]) -> Result<(), TensorError> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.buffers.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "sgd_step: {} parameters but {} momentum buffers",
                params.len(),
                self.buffers.len()
            )));
        }
        let SgdConfig { learning_rate, momentum, weight_decay } = self.config;
        for (param, buf) in params.iter().zip(self.buffers.iter_mut()) {
            if buf.len() != param.len() {
                return Err(TensorError::Shape {
                    op: "sgd_step",
                    a_rows: param.rows(),
                    a_cols: param.cols(),
                    b_rows: buf.len(),
                    b_cols: 1,
                });
            }
            let grad = param.grad();
            if let Some(g) = &grad {
                if g.len() != param.len() {
                    return Err(TensorError::Shape {
                        op: "sgd_step",
                        a_rows: param.rows(),
                        a_cols: param.cols(),
                        b_rows: g.len(),
                        b_cols: 1,
                    });
                }
            }
            param.map_data(|data| {
                for (i, (d, b)) in data.iter_mut().zip(buf.iter_mut()).enumerate() {
                    let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * *d;
                    *b = momentum * *b + g;
                    *d -= learning_rate * *b;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: Option<f64>) -> Tensor {
        let t = Tensor::param(1, 1, vec![value]).unwrap();
        if let Some(g) = grad {
            t.node.accumulate(&[g]);
        }
        t
    }

    #[test]
    fn vanilla_step() {
        let p = single(1.0, Some(2.0));
        let mut opt = SgdOptimizer::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_hand_iterated() {
        // buf1 = 1, p1 = -0.1; buf2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let p = single(0.0, Some(1.0));
        let mut opt = SgdOptimizer::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        p.zero_grad();
        p.node.accumulate(&[1.0]);
        opt.step(&[&p]).unwrap();
        assert!((p.item() - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_stationary() {
        let p = single(3.25, None);
        let mut opt = SgdOptimizer::new(SgdConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        assert_eq!(p.item(), 3.25);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let p = single(0.1234567890123, Some(17.0));
        let before = p.item().to_bits();
        let mut opt = SgdOptimizer::new(SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        assert_eq!(p.item().to_bits(), before);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let p = single(2.0, None);
        let mut opt = SgdOptimizer::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        })
        .unwrap();
        opt.step(&[&p]).unwrap();
        // g = 0 + 0.5*2 = 1; p = 2 - 0.1 = 1.9
        assert!((p.item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdOptimizer::new(SgdConfig { learning_rate: -0.1, momentum: 0.0, weight_decay: 0.0 }).is_err());
        assert!(SgdOptimizer::new(SgdConfig { learning_rate: 0.1, momentum: 1.0, weight_decay: 0.0 }).is_err());
        assert!(SgdOptimizer::new(SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: -1.0 }).is_err());
    }
}
