use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Weight decay is folded into the gradient before the momentum update.
    SgdMomentum { momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Cosine annealing from the base rate to `eta_min` over `t_max` schedule steps.
    Cosine { t_max: usize, eta_min: f64 },
}

#[derive(Debug, Clone)]
struct Moments {
    shape: Vec<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// Parameters are identified by their position in the slice passed to
/// [`OptimizerState::step`], so callers must pass them in a stable order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    schedule_step: usize,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(OptimizerState {
            kind,
            base_lr: lr,
            weight_decay,
            schedule,
            schedule_step: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr, weight_decay, Schedule::Constant)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(
            OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
            Schedule::Constant,
        )
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Learning rate at the current schedule step.
    pub fn learning_rate(&self) -> f64 {
        self.lr_at(self.schedule_step)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine { t_max, eta_min } => {
                if t_max == 0 {
                    return eta_min;
                }
                let t = step.min(t_max) as f64;
                eta_min + 0.5 * (self.base_lr - eta_min) * (1.0 + (PI * t / t_max as f64).cos())
            }
        }
    }

    /// Moves the schedule forward one interval (one epoch in the training loops).
    pub fn advance_schedule(&mut self) {
        self.schedule_step += 1;
    }

    pub fn schedule_step(&self) -> usize {
        self.schedule_step
    }

    /// Applies one update to every parameter that requires a gradient and
    /// holds one. Frozen parameters and parameters that received no gradient
    /// are left bitwise untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let lr = self.learning_rate();
        let wd = self.weight_decay;
        for (slot, p) in self.moments.iter_mut().zip(params.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            let m = slot.get_or_insert_with(|| Moments {
                shape: p.shape().to_vec(),
                first: vec![0.0; p.numel()],
                second: vec![0.0; p.numel()],
                steps: 0,
            });
            if m.shape != p.shape() {
                return Err(Error::dim(
                    "optimizer step",
                    format!("moment buffer {:?} vs parameter {:?}", m.shape, p.shape()),
                ));
            }
            m.steps += 1;
            let theta = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..theta.len() {
                        let g = grad[i] + wd * theta[i];
                        m.first[i] = momentum * m.first[i] + g;
                        theta[i] -= lr * m.first[i];
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(m.steps as i32);
                    let bc2 = 1.0 - beta2.powi(m.steps as i32);
                    for i in 0..theta.len() {
                        let g = grad[i];
                        m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                        m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                        let mhat = m.first[i] / bc1;
                        let vhat = m.second[i] / bc2;
                        theta[i] -= lr * wd * theta[i];
                        theta[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
