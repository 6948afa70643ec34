//! Training objectives: adapter-on-frozen-backbone and full fine-tuning.

use crate::error::Result;
use crate::peft::{adapted_features, Adaptation, BoundPayload, Payload};
use crate::tensor::{Gradients, Tape, Tensor};
use crate::vit::{classify_batch, BoundHead, BoundVit, Head, ViTConfig, ViTParams};

use super::data::Dataset;
use super::train::{batch_accuracy, Objective, StepOutput};

/// Per-sample targets and the column mask of a classification objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Logit column of each training sample.
    pub columns: Vec<usize>,
    /// Columns the softmax may use; all when `None`.
    pub mask: Option<Vec<bool>>,
}

impl Targets {
    /// Global labels on a head over all classes, optionally restricted to `active` classes.
    pub fn global(data: &Dataset, num_classes: usize, active: Option<&[usize]>) -> Self {
        let mask = active.map(|a| (0..num_classes).map(|c| a.contains(&c)).collect());
        Targets {
            columns: data.labels.clone(),
            mask,
        }
    }

    /// Labels re-indexed into a task-local head whose column `i` is `classes[i]`.
    pub fn local(data: &Dataset, classes: &[usize]) -> Self {
        Targets {
            columns: data
                .labels
                .iter()
                .map(|l| classes.iter().position(|c| c == l).expect("label belongs to the task"))
                .collect(),
            mask: None,
        }
    }

    fn mask_or_all(&self, classes: usize) -> Vec<bool> {
        self.mask.clone().unwrap_or_else(|| vec![true; classes])
    }
}

/// A PEFT payload (or nothing) plus a head trained on a frozen backbone.
pub struct AdapterObjective<'a> {
    pub cfg: &'a ViTConfig,
    pub base: &'a ViTParams,
    pub data: &'a Dataset,
    pub payload: Option<&'a mut Payload>,
    pub head: &'a mut Head,
    pub targets: Targets,
}

impl Objective for AdapterObjective<'_> {
    type Bound = (Option<BoundPayload>, BoundHead);

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn build(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, Self::Bound)> {
        let vit = self.base.bind(tape);
        let bound = self.payload.as_deref().map(|p| p.bind(tape));
        let adaptation = bound
            .as_ref()
            .map_or_else(Adaptation::none, |b| Adaptation::single(b, self.cfg.num_layers));
        let head = self.head.bind(tape);
        let images = self.data.image_refs(batch);
        let f = adapted_features(tape, self.cfg, &vit, &images, &adaptation)?;
        let logits = classify_batch(tape, f, &head)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.targets.columns[i]).collect();
        let mask = self.targets.mask_or_all(self.head.classes());
        let loss = tape.cross_entropy_masked(logits, &targets, &mask)?;
        Ok((
            StepOutput {
                loss,
                logits,
                targets,
                mask: self.targets.mask.clone(),
            },
            (bound, head),
        ))
    }

    fn absorb(&mut self, bound: &Self::Bound, grads: &Gradients) -> Result<()> {
        if let (Some(p), Some(b)) = (self.payload.as_deref_mut(), &bound.0) {
            p.absorb(b, grads)?;
        }
        self.head.absorb(&bound.1, grads)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.payload.as_deref_mut().map_or_else(Vec::new, Payload::tensors_mut);
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Every backbone parameter plus its head.
pub struct FullObjective<'a> {
    pub cfg: &'a ViTConfig,
    pub params: &'a mut ViTParams,
    pub data: &'a Dataset,
    pub targets: Targets,
}

impl Objective for FullObjective<'_> {
    type Bound = (BoundVit, BoundHead);

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn build(&self, tape: &mut Tape, batch: &[usize]) -> Result<(StepOutput, Self::Bound)> {
        let vit = self.params.bind(tape);
        let head = self.params.head.bind(tape);
        let images = self.data.image_refs(batch);
        let f = adapted_features(tape, self.cfg, &vit, &images, &Adaptation::none())?;
        let logits = classify_batch(tape, f, &head)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.targets.columns[i]).collect();
        let mask = self.targets.mask_or_all(self.params.head.classes());
        let loss = tape.cross_entropy_masked(logits, &targets, &mask)?;
        Ok((
            StepOutput {
                loss,
                logits,
                targets,
                mask: self.targets.mask.clone(),
            },
            (vit, head),
        ))
    }

    fn absorb(&mut self, bound: &Self::Bound, grads: &Gradients) -> Result<()> {
        self.params.absorb(&bound.0, grads)?;
        self.params.head.absorb(&bound.1, grads)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.all_tensors_mut()
    }
}

/// Mean loss and accuracy over a whole dataset, evaluated in chunks without training.
pub fn evaluate_objective<O: Objective>(obj: &O, chunk: usize) -> Result<(f64, f64)> {
    let n = obj.num_samples();
    let mut tape = Tape::new();
    let (mut loss, mut correct) = (0.0, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for batch in idx.chunks(chunk.max(1)) {
        tape.reset();
        let (out, _) = obj.build(&mut tape, batch)?;
        let classes = tape.shape(out.logits)[1];
        loss += tape.scalar_value(out.loss) * batch.len() as f64;
        correct += batch_accuracy(tape.value(out.logits), classes, &out.targets, out.mask.as_deref()) * batch.len() as f64;
    }
    let n = n.max(1) as f64;
    Ok((loss / n, correct / n))
}
