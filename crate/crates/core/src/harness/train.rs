//! Minibatch training loop shared by every method.

use crate::error::{Error, Result};
use crate::rng::{permutation, Seed, StreamId};
use crate::tensor::{Gradients, OptimizerKind, OptimizerState, Schedule, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerName {
    Sgd,
    AdamW,
}

impl OptimizerName {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerName::Sgd => "sgd",
            OptimizerName::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerName::Sgd),
            "adamw" | "adam" => Some(OptimizerName::AdamW),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine annealing over `epochs` down to `eta_min`; constant otherwise.
    pub cosine: bool,
    pub eta_min: f64,
}

impl TrainConfig {
    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        let kind = match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
            },
            OptimizerName::AdamW => OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        };
        let schedule = if self.cosine {
            Schedule::Cosine {
                t_max: self.epochs,
                eta_min: self.eta_min,
            }
        } else {
            Schedule::Constant
        };
        OptimizerState::new(kind, self.lr, self.weight_decay, schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.optimizer_state().map(|_| ())
    }
}

/// What one minibatch contributes: the loss plus logits for accuracy logging.
pub struct StepOutput {
    pub loss: Var,
    pub logits: Var,
    /// Target column in `logits` for each sample.
    pub targets: Vec<usize>,
    /// Columns eligible for the argmax; all when `None`.
    pub mask: Option<Vec<bool>>,
}

/// A model plus training data, trainable by [`fit`].
pub trait Objective {
    type Bound;
    fn num_samples(&self) -> usize;
    fn build(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, Self::Bound)>;
    fn absorb(&mut self, bound: &Self::Bound, grads: &Gradients) -> Result<()>;
    /// Trainable tensors in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Argmax over eligible columns; ties go to the lowest column.
pub fn masked_argmax(row: &[f64], mask: Option<&[bool]>) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if mask.is_some_and(|m| !m[j]) {
            continue;
        }
        if best.0 == usize::MAX || v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

pub fn batch_accuracy(logits: &[f64], classes: usize, targets: &[usize], mask: Option<&[bool]>) -> f64 {
    let correct = logits
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| masked_argmax(row, mask) == t)
        .count();
    correct as f64 / targets.len().max(1) as f64
}

/// Shuffled minibatch SGD/AdamW over the objective; gradients are cleared after every step.
pub fn fit<O: Objective>(obj: &mut O, cfg: &TrainConfig, seed: Seed, stream: StreamId) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let n = obj.num_samples();
    if n == 0 {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let mut opt = cfg.optimizer_state()?;
    let mut tape = Tape::new();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut seed.stream(stream.with(epoch as u64)), n);
        for batch in order.chunks(cfg.batch_size) {
            tape.reset();
            let (out, bound) = obj.build(&mut tape, batch)?;
            let loss = tape.scalar_value(out.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let classes = tape.shape(out.logits)[1];
            let accuracy = batch_accuracy(tape.value(out.logits), classes, &out.targets, out.mask.as_deref());
            let grads = tape.backward(out.loss)?;
            obj.absorb(&bound, &grads)?;
            let mut params = obj.params_mut();
            opt.step(&mut params)?;
            for p in params {
                p.zero_grad();
            }
            log.push(StepLog {
                step: log.len(),
                epoch,
                loss,
                accuracy,
            });
        }
        opt.advance_schedule();
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Least squares on a single weight vector.
    struct Lsq {
        w: Tensor,
        x: Vec<[f64; 2]>,
        y: Vec<f64>,
    }

    impl Objective for Lsq {
        type Bound = Var;
        fn num_samples(&self) -> usize {
            self.x.len()
        }
        fn build(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, Var)> {
            let w = tape.leaf(&self.w);
            let xs: Vec<f64> = batch.iter().flat_map(|&i| self.x[i]).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
            let x = tape.constant(vec![batch.len(), 2], xs)?;
            let y = tape.constant(vec![batch.len(), 1], ys)?;
            let pred = tape.matmul(x, w)?;
            let r = tape.sub(pred, y)?;
            let sq = tape.mul(r, r)?;
            let loss = tape.mean(sq);
            Ok((
                StepOutput {
                    loss,
                    logits: pred,
                    targets: vec![0; batch.len()],
                    mask: None,
                },
                w,
            ))
        }
        fn absorb(&mut self, bound: &Var, grads: &Gradients) -> Result<()> {
            grads.accumulate_into(*bound, &mut self.w)
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.w]
        }
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let x: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 / 10.0, 1.0]).collect();
        let y: Vec<f64> = x.iter().map(|p| 3.0 * p[0] - 1.0).collect();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 4,
            optimizer: OptimizerName::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: true,
            eta_min: 0.0,
        };
        let run = || {
            let mut m = Lsq {
                w: Tensor::zeros(&[2, 1]).with_requires_grad(true),
                x: x.clone(),
                y: y.clone(),
            };
            let log = fit(&mut m, &cfg, Seed(1), StreamId::named("fit")).unwrap();
            (m.w, log)
        };
        let (w, log) = run();
        assert!(log.last().unwrap().loss < 1e-3 * log[0].loss);
        assert!((w.data()[0] - 3.0).abs() < 0.05);
        assert!(w.grad().is_none());
        assert_eq!(run().1, log);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(masked_argmax(&[1.0, 3.0, 3.0], None), 1);
        assert_eq!(masked_argmax(&[1.0, 3.0, 2.0], Some(&[true, false, true])), 2);
    }
}
