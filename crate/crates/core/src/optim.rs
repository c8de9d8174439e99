use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn for_kind(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Sgd::new(lr, 0.0),
            OptimizerKind::SgdMomentum => Sgd::new(lr, momentum),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update. `params` and `grads` must line up one-to-one and keep
    /// the same order across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for ((w, &dw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                if self.momentum == 0.0 {
                    *w -= self.lr * dw;
                } else {
                    *vel = self.momentum * *vel + dw;
                    *w -= self.lr * *vel;
                }
            }
        }
    }
}
