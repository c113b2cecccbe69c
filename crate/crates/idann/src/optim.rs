//! SGD with momentum and per-update learning-rate decay.

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Base learning rate, mu > 0.
    pub learning_rate: f64,
    /// Per-update multiplicative decay: effective rate is mu / (1 + decay * u).
    pub decay: f64,
    /// Momentum coefficient in [0, 1).
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.decay < 0.0 {
            return Err(Error::Config(format!("decay must be >= 0, got {}", self.decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn effective_rate(&self, update_counter: u64) -> f64 {
        self.learning_rate / (1.0 + self.decay * update_counter as f64)
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            decay: 1e-6,
            momentum: 0.9,
        }
    }
}

/// One momentum-SGD update:
/// `velocity <- momentum * velocity - rate * grad; param <- param + velocity`.
/// `update_counter` is zero-based.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, cfg: &OptimizerConfig, update_counter: u64) {
    let rate = cfg.effective_rate(update_counter);
    for (entry, grad) in params.entries.iter_mut().zip(&grads.entries) {
        if let (Some(p), Some((dw, db))) = (entry.as_mut(), grad.as_ref()) {
            for ((v, w), g) in p
                .vel_weight
                .data_mut()
                .iter_mut()
                .zip(p.weight.data_mut())
                .zip(dw.data())
            {
                *v = cfg.momentum * *v - rate * g;
                *w += *v;
            }
            for ((v, b), g) in p
                .vel_bias
                .data_mut()
                .iter_mut()
                .zip(p.bias.data_mut())
                .zip(db.data())
            {
                *v = cfg.momentum * *v - rate * g;
                *b += *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, LayerSpec};
    use crate::rng::substream;
    use crate::tensor::Tensor;

    fn scalar_setup() -> (Vec<LayerSpec>, ParamSet) {
        let layers = vec![LayerSpec::Dense { units: 1 }];
        let mut rng = substream(9, "init");
        let params = init_params(&layers, &[1], &mut rng).unwrap();
        (layers, params)
    }

    fn grad_of(params: &ParamSet, gw: f64, gb: f64) -> Gradients {
        let mut g = Gradients::zeros_like(params);
        g.entries[0] = Some((
            Tensor::new(vec![1, 1], vec![gw]).unwrap(),
            Tensor::new(vec![1], vec![gb]).unwrap(),
        ));
        g
    }

    #[test]
    fn vanilla_sgd_without_momentum() {
        let (_, mut params) = scalar_setup();
        let w0 = params.entries[0].as_ref().unwrap().weight.data()[0];
        let cfg = OptimizerConfig { learning_rate: 0.1, decay: 0.0, momentum: 0.0 };
        let g = grad_of(&params, 2.0, 0.0);
        sgd_step(&mut params, &g, &cfg, 0);
        let w1 = params.entries[0].as_ref().unwrap().weight.data()[0];
        assert!((w1 - (w0 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (_, mut params) = scalar_setup();
        let before = params.flatten();
        let g = Gradients::zeros_like(&params);
        sgd_step(&mut params, &g, &OptimizerConfig::default(), 0);
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolled_recurrence() {
        let (_, mut params) = scalar_setup();
        let w0 = params.entries[0].as_ref().unwrap().weight.data()[0];
        let (mu, m) = (0.1, 0.9);
        let cfg = OptimizerConfig { learning_rate: mu, decay: 0.0, momentum: m };
        let (g1, g2) = (3.0, -1.0);
        let step1 = grad_of(&params, g1, 0.0);
        sgd_step(&mut params, &step1, &cfg, 0);
        let step2 = grad_of(&params, g2, 0.0);
        sgd_step(&mut params, &step2, &cfg, 1);
        // v1 = -mu g1; w1 = w0 + v1; v2 = m v1 - mu g2; w2 = w1 + v2
        let v1 = -mu * g1;
        let v2 = m * v1 - mu * g2;
        let expected = w0 + v1 + v2;
        let w2 = params.entries[0].as_ref().unwrap().weight.data()[0];
        assert!((w2 - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_effective_rate() {
        let cfg = OptimizerConfig { learning_rate: 0.01, decay: 0.5, momentum: 0.0 };
        assert!((cfg.effective_rate(0) - 0.01).abs() < 1e-18);
        assert!((cfg.effective_rate(2) - 0.005).abs() < 1e-18);
    }
}
