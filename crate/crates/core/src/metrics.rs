//! Confusion-matrix metrics: per-class IoU, mean IoU and pixel accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DcaError, Result};

/// `counts[i][j]` = pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(invalid("confusion matrix must be square"));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(invalid(format!("prediction has {} pixels, ground truth {}", pred.len(), truth.len())));
        }
        // Validate first so a bad label leaves the matrix untouched.
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore_index {
                continue;
            }
            if t as usize >= self.k || p as usize >= self.k {
                return Err(invalid(format!("label {} / prediction {} out of range for {} classes", t, p, self.k)));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != ignore_index {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k {
            return Err(invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a nonempty union.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(DcaError::UndefinedMetric("mean IoU of an empty confusion matrix".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(DcaError::UndefinedMetric("pixel accuracy over zero pixels".into()));
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub pixel_acc: f64,
    /// `null` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub num_pixels: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_matrix(cm: &ConfusionMatrix, config_digest: impl Into<String>) -> Result<Self> {
        Ok(Self {
            mean_iou: cm.mean_iou()?,
            pixel_acc: cm.pixel_accuracy()?,
            per_class_iou: cm.per_class_iou(),
            num_pixels: cm.total(),
            config_digest: config_digest.into(),
        })
    }
}
