//! Eval-mode predictions and accuracy reports.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::scalar::Scalar;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Logits of every head and of the combined output for a whole dataset,
/// from a single eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// `head_logits[h]` is `[N * K]`, row-major.
    pub head_logits: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn combined_row(&self, i: usize) -> &[f64] {
        &self.combined[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn head_row(&self, head: usize, i: usize) -> &[f64] {
        &self.head_logits[head][i * self.num_classes..(i + 1) * self.num_classes]
    }

    fn accuracy_of(&self, row: impl Fn(usize) -> usize) -> f64 {
        let correct = (0..self.len()).filter(|&i| row(i) == self.labels[i]).count();
        correct as f64 / self.len() as f64
    }

    pub fn combined_accuracy(&self) -> f64 {
        self.accuracy_of(|i| argmax(self.combined_row(i)))
    }

    pub fn head_accuracy(&self, head: usize) -> f64 {
        self.accuracy_of(|i| argmax(self.head_row(head, i)))
    }

    /// Mean cross-entropy of the combined logits.
    pub fn combined_loss(&self) -> f64 {
        let total: f64 = (0..self.len())
            .map(|i| {
                let row = self.combined_row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lse - row[self.labels[i]]
            })
            .sum();
        total / self.len() as f64
    }
}

/// Runs the model in eval mode over `dataset` in order, `batch_size` samples at a time.
pub fn predict<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<Predictions> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.num_classes > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.num_classes,
            model.num_classes()
        )));
    }
    let mut model = model.clone();
    let heads = model.num_heads();
    let mut head_logits = vec![Vec::with_capacity(dataset.len() * model.num_classes()); heads];
    let mut combined = Vec::with_capacity(dataset.len() * model.num_classes());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk);
        let mut tape = Tape::new();
        let x = model.input_var(&mut tape, &batch.images)?;
        let out = model.forward(&mut tape, x, Mode::Eval)?;
        for (h, &v) in out.heads.head_logits.iter().enumerate() {
            head_logits[h].extend(tape.value(v).data().iter().map(|x| x.to_f64_lossy()));
        }
        combined.extend(tape.value(out.heads.combined).data().iter().map(|x| x.to_f64_lossy()));
    }
    Ok(Predictions { num_classes: model.num_classes(), labels: dataset.labels.clone(), head_logits, combined })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Cross-entropy of the combined output.
    pub loss: f64,
    /// Top-1 accuracy of the combined (averaged) output.
    pub accuracy: f64,
    /// Top-1 accuracy of each head on its own, head 1 first.
    pub head_accuracies: Vec<f64>,
}

impl MetricsReport {
    pub fn from_predictions(p: &Predictions) -> Self {
        MetricsReport {
            samples: p.len(),
            loss: p.combined_loss(),
            accuracy: p.combined_accuracy(),
            head_accuracies: (0..p.head_logits.len()).map(|h| p.head_accuracy(h)).collect(),
        }
    }
}

/// Combined and per-head top-1 accuracy from one eval-mode pass.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    Ok(MetricsReport::from_predictions(&predict(model, dataset, batch_size)?))
}
