//! Stochastic gradient descent with momentum and coupled weight decay.

use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    Skipped,
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    skipped: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Self {
        Self {
            config,
            velocity: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            skipped: 0,
        }
    }

    pub fn skipped_steps(&self) -> usize {
        self.skipped
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    /// `v <- m*v + g + wd*theta; theta <- theta - lr*v`, then zeroes `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> StepOutcome {
        if !grads.is_finite() {
            self.skipped += 1;
            log::warn!("non-finite gradient, optimizer step skipped");
            grads.zero();
            return StepOutcome::Skipped;
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
        } = self.config;
        for ((param, vel), g) in store.iter_mut().zip(&mut self.velocity).zip(&grads.bufs) {
            if !param.trainable {
                continue;
            }
            for ((theta, v), &gv) in param.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = m * *v + gv + wd * *theta;
                *theta -= lr * *v;
            }
        }
        grads.zero();
        StepOutcome::Applied
    }
}
