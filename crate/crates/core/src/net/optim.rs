use serde::{Deserialize, Serialize};

use super::model::LayerParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Loss and class accuracy are recorded every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            max_iterations: 2000,
            batch_size: 6,
            weight_decay: 0.005,
            momentum: 0.0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }
}

/// One SGD update of `params` in place.
///
/// With `momentum == 0` this is `p -= lr * (g + wd * p)`; otherwise the
/// velocity accumulates `v = momentum * v + (g + wd * p)` and `p -= lr * v`.
/// Decay is skipped when `decay` is false (biases).
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &TrainConfig, decay: bool) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let step = g + wd * *p;
        if cfg.momentum == 0.0 {
            *p -= cfg.learning_rate * step;
        } else {
            *v = cfg.momentum * *v + step;
            *p -= cfg.learning_rate * *v;
        }
    }
}

/// SGD with per-parameter momentum buffers.
pub struct Sgd {
    cfg: TrainConfig,
    velocity: Vec<LayerParams>,
}

impl Sgd {
    pub fn new(cfg: TrainConfig, params: &[LayerParams]) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: params.iter().map(LayerParams::zeros_like).collect(),
        })
    }

    pub fn step(&mut self, params: &mut [LayerParams], grads: &[LayerParams]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            sgd_step(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), &self.cfg, true);
            sgd_step(&mut p.bias, &g.bias, &mut v.bias, &self.cfg, false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64, momentum: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn decay_only_step() {
        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], &mut [0.0], &cfg(0.1, 0.005, 0.0), true);
        assert!((p[0] - 0.9995).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = [0.3];
        sgd_step(&mut p, &[2.0], &mut [0.0], &cfg(0.001, 0.0, 0.0), true);
        assert!((p[0] - (0.3 - 0.002)).abs() < 1e-15);
    }

    #[test]
    fn bias_ignores_decay() {
        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], &mut [0.0], &cfg(0.1, 0.005, 0.0), false);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn momentum_two_steps_match_recurrence() {
        let (lr, wd, mu) = (0.1, 0.01, 0.9);
        let c = cfg(lr, wd, mu);
        let (g1, g2) = (0.5, -0.25);
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[g1], &mut v, &c, true);
        sgd_step(&mut p, &[g2], &mut v, &c, true);

        let v1 = g1 + wd * 1.0;
        let p1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = [0.7, -1.5];
        sgd_step(&mut p, &[3.0, 1.0], &mut [0.0; 2], &cfg(0.0, 0.005, 0.9), true);
        assert_eq!(p, [0.7, -1.5]);
    }

    #[test]
    fn validation() {
        assert!(cfg(-1.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.0, 1.0).validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
