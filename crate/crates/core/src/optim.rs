//! First-order parameter updates. All optimizers minimize; ascend by passing
//! the negated gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Stateful descent rule over a flat parameter vector.
pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]);
}

/// Heavy-ball SGD: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Optimizer selection for training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd { momentum } => Box::new(SgdMomentum::new(lr, momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd { momentum } => write!(f, "sgd:{momentum}"),
            OptimizerKind::Adam => f.write_str("adam"),
        }
    }
}

/// Parses `adam`, `sgd` (momentum 0.9) or `sgd:<momentum>`.
impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Config(format!("unknown optimizer `{s}` (expected sgd, sgd:<momentum> or adam)"));
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::default()),
            _ => {
                let m: f64 = s.strip_prefix("sgd:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if !(0.0..1.0).contains(&m) {
                    return Err(bad());
                }
                Ok(OptimizerKind::Sgd { momentum: m })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimize(opt: &mut dyn Optimizer, iters: usize) -> Vec<f64> {
        // f(x) = sum_i (i + 1) (x_i - 1)^2
        let mut x = vec![5.0, -3.0, 0.0];
        for _ in 0..iters {
            let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * (v - 1.0)).collect();
            opt.step(&mut x, &g);
        }
        x
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let x = minimize(&mut SgdMomentum::new(0.05, 0.9), 500);
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-6), "{x:?}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let x = minimize(&mut Adam::new(0.05), 3000);
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut x = vec![1.0, 2.0];
        SgdMomentum::new(0.1, 0.9).step(&mut x, &[0.0, 0.0]);
        Adam::new(0.1).step(&mut x, &[0.0, 0.0]);
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn optimizer_kind_round_trip() {
        for k in [OptimizerKind::Adam, OptimizerKind::Sgd { momentum: 0.5 }, OptimizerKind::default()] {
            assert_eq!(k.to_string().parse::<OptimizerKind>().unwrap(), k);
        }
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd { momentum: 0.9 });
        assert!("sgd:1.5".parse::<OptimizerKind>().is_err());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
