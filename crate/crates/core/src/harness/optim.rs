//! SGD with momentum and Adam over named parameters.

use crate::error::{Error, Result};
use crate::nn::NamedParams;

use super::config::{OptimizerConfig, OptimizerKind};

/// Per-parameter buffers plus the step counter; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// `(slot name, values)`: `velocity.<param>` for SGD, `m.<param>` and
    /// `v.<param>` for Adam.
    pub slots: Vec<(String, Vec<f64>)>,
}

pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &NamedParams) -> Self {
        let mut slots = Vec::new();
        let prefixes: &[&str] = match config.kind {
            OptimizerKind::Sgd => &["velocity"],
            OptimizerKind::Adam => &["m", "v"],
        };
        for prefix in prefixes {
            for (name, p) in params {
                slots.push((format!("{prefix}.{name}"), vec![0.0; p.numel()]));
            }
        }
        Optimizer {
            config: config.clone(),
            state: OptimizerState {
                kind: config.kind,
                step: 0,
                slots,
            },
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Replaces the buffers after checking they line up with the current ones.
    pub fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        let fits = state.kind == self.state.kind
            && state.slots.len() == self.state.slots.len()
            && state
                .slots
                .iter()
                .zip(&self.state.slots)
                .all(|((a, va), (b, vb))| a == b && va.len() == vb.len());
        if !fits {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        self.state = state;
        Ok(())
    }

    /// One update from the gradients currently stored on `params`.
    pub fn step(&mut self, params: &NamedParams) -> Result<()> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let mut scale = 1.0;
        if self.config.clip_norm > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.clip_norm {
                scale = self.config.clip_norm / norm;
            }
        }
        self.state.step += 1;
        let c = &self.config;
        let lr = c.learning_rate;
        let n = params.len();
        match c.kind {
            OptimizerKind::Sgd => {
                for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
                    let vel = &mut self.state.slots[i].1;
                    p.update(|w| {
                        for j in 0..w.len() {
                            vel[j] = c.momentum * vel[j] + scale * g[j];
                            w[j] -= lr * vel[j];
                        }
                    });
                }
            }
            OptimizerKind::Adam => {
                let t = self.state.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let (ms, vs) = self.state.slots.split_at_mut(n);
                for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
                    let m = &mut ms[i].1;
                    let v = &mut vs[i].1;
                    p.update(|w| {
                        for j in 0..w.len() {
                            let gj = scale * g[j];
                            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                            let mh = m[j] / bc1;
                            let vh = v[j] / bc2;
                            w[j] -= lr * mh / (vh.sqrt() + c.epsilon);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_step(opt: &mut Optimizer, params: &NamedParams) {
        let x = &params[0].1;
        x.zero_grad();
        x.square().sum().backward().unwrap();
        opt.step(params).unwrap();
    }

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        let params: NamedParams = vec![("x".into(), Tensor::param(&[1], vec![1.0]).unwrap())];
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.5,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &params);
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            quadratic_step(&mut opt, &params);
            v = 0.5 * v + 2.0 * x;
            x -= 0.1 * v;
            assert!((params[0].1.item() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let params: NamedParams = vec![("x".into(), Tensor::param(&[2], vec![3.0, -0.5]).unwrap())];
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 0.01,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &params);
        quadratic_step(&mut opt, &params);
        let x = params[0].1.to_vec();
        assert!((x[0] - 2.99).abs() < 1e-9);
        assert!((x[1] + 0.49).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let params: NamedParams = vec![("x".into(), Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap())];
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &params);
        for _ in 0..2000 {
            quadratic_step(&mut opt, &params);
        }
        assert!(params[0].1.to_vec().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_the_update() {
        let params: NamedParams = vec![("x".into(), Tensor::param(&[1], vec![100.0]).unwrap())];
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            momentum: 0.0,
            clip_norm: 1.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &params);
        quadratic_step(&mut opt, &params);
        assert!((params[0].1.item() - 99.0).abs() < 1e-12);
    }

    #[test]
    fn state_must_match() {
        let params: NamedParams = vec![("x".into(), Tensor::param(&[2], vec![0.0; 2]).unwrap())];
        let mut adam = Optimizer::new(&OptimizerConfig::default(), &params);
        let sgd = Optimizer::new(
            &OptimizerConfig {
                kind: OptimizerKind::Sgd,
                ..OptimizerConfig::default()
            },
            &params,
        );
        assert!(adam.load_state(sgd.state().clone()).is_err());
    }
}
