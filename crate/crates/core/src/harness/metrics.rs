//! Accuracy matrix and the continual-learning metrics derived from it.

use crate::error::{Error, Result};

/// Correct predictions out of a test-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

/// `R[i][j]`: accuracy on task `j` after training through task `i`; defined only for `j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<Tally>>>,
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Self {
        let t = test_sizes.len();
        AccuracyMatrix {
            entries: vec![vec![None; t]; t],
            test_sizes,
        }
    }

    /// Builds a matrix from accuracies, e.g. for metric identity checks.
    pub fn from_rows(rows: &[Vec<f64>], test_size: usize) -> Result<Self> {
        let t = rows.len();
        let mut m = AccuracyMatrix::new(vec![test_size; t]);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Contract(format!("row {i} has {} entries, expected {}", row.len(), i + 1)));
            }
            for (j, &a) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Contract(format!("accuracy {a} outside [0, 1]")));
                }
                m.entries[i][j] = Some(Tally {
                    correct: (a * test_size as f64).round() as usize,
                    total: test_size,
                });
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.test_sizes.len()
    }

    pub fn set(&mut self, i: usize, j: usize, tally: Tally) -> Result<()> {
        if j > i || i >= self.tasks() {
            return Err(Error::Contract(format!("R[{i}][{j}] is outside the lower triangle")));
        }
        if tally.total != self.test_sizes[j] {
            return Err(Error::Contract(format!(
                "task {j} has {} test samples, tally covers {}",
                self.test_sizes[j], tally.total
            )));
        }
        self.entries[i][j] = Some(tally);
        Ok(())
    }

    pub fn tally(&self, i: usize, j: usize) -> Option<Tally> {
        self.entries.get(i)?.get(j).copied().flatten()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.tally(i, j).and_then(Tally::accuracy)
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::Undefined(format!("R[{i}][{j}] has not been evaluated")))
    }

    /// Micro-averaged accuracy of the final row.
    pub fn final_average(&self) -> Result<f64> {
        let last = self.tasks().checked_sub(1).ok_or_else(|| Error::Undefined("empty matrix".into()))?;
        let tallies: Vec<Tally> = (0..self.tasks())
            .map(|j| {
                self.tally(last, j)
                    .ok_or_else(|| Error::Undefined(format!("R[{last}][{j}] has not been evaluated")))
            })
            .collect::<Result<_>>()?;
        average_accuracy(&tallies)
    }
}

/// `sum correct / sum sizes` over every task's test set.
pub fn average_accuracy(tallies: &[Tally]) -> Result<f64> {
    let correct: usize = tallies.iter().map(|t| t.correct).sum();
    let total: usize = tallies.iter().map(|t| t.total).sum();
    if total == 0 {
        return Err(Error::Undefined("average accuracy of empty test sets".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn require_two(r: &AccuracyMatrix, what: &str) -> Result<usize> {
    match r.tasks() {
        t if t >= 2 => Ok(t),
        _ => Err(Error::Undefined(format!("{what} needs at least two tasks"))),
    }
}

/// Mean over tasks of the drop from the best later accuracy to the final one.
pub fn forgetting(r: &AccuracyMatrix) -> Result<f64> {
    let t = require_two(r, "forgetting")?;
    let last = t - 1;
    let mut sum = 0.0;
    for j in 0..last {
        let mut best = f64::NEG_INFINITY;
        for i in j..t {
            best = best.max(r.require(i, j)?);
        }
        sum += best - r.require(last, j)?;
    }
    Ok(sum / last as f64)
}

/// Mean over tasks of final accuracy minus accuracy right after learning the task.
pub fn backward_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let t = require_two(r, "backward transfer")?;
    let last = t - 1;
    let mut sum = 0.0;
    for j in 0..last {
        sum += r.require(last, j)? - r.require(j, j)?;
    }
    Ok(sum / last as f64)
}

/// Accuracy split by whether the routed expert was the right one.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConditionalAccuracy {
    pub overall: Tally,
    pub right_expert: Tally,
    pub wrong_expert: Tally,
}

impl ConditionalAccuracy {
    pub fn record(&mut self, expert_correct: bool, prediction_correct: bool) {
        self.overall.add(prediction_correct);
        if expert_correct {
            self.right_expert.add(prediction_correct);
        } else {
            self.wrong_expert.add(prediction_correct);
        }
    }

    pub fn merge(&mut self, other: &ConditionalAccuracy) {
        for (a, b) in [
            (&mut self.overall, other.overall),
            (&mut self.right_expert, other.right_expert),
            (&mut self.wrong_expert, other.wrong_expert),
        ] {
            a.correct += b.correct;
            a.total += b.total;
        }
    }

    /// Fraction of samples routed to their own expert.
    pub fn selection_accuracy(&self) -> Option<f64> {
        (self.overall.total > 0).then(|| self.right_expert.total as f64 / self.overall.total as f64)
    }
}
