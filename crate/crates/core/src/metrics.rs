//! Task losses and evaluation metrics.

use onlineaug_tape::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Top1Accuracy,
    DicePerClass,
    MeanDice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

impl MetricValue {
    pub fn new(kind: MetricKind, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(invalid(format!("metric {value} outside [0, 1]")));
        }
        Ok(Self { kind, value })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, labels);
    g.value(ce).item()
}

/// Mean cross-entropy and top-1 accuracy of `logits: [n, k]`.
pub fn classification_loss_and_metric(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(invalid(format!("logits {s:?} do not match {} labels", labels.len())));
    }
    let k = s[1];
    if labels.iter().any(|&l| l >= k) {
        return Err(invalid("label outside the logit range"));
    }
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok((cross_entropy(logits, labels), correct as f64 / labels.len() as f64))
}

/// Per-pixel argmax of `[n, k, h, w]` logits.
pub fn predict_masks(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            out.push(argmax((0..k).map(|c| d[(b * k + c) * hw + p])));
        }
    }
    out
}

/// Intersection, predicted and true pixel counts per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiceCounts {
    pub inter: Vec<usize>,
    pub pred: Vec<usize>,
    pub truth: Vec<usize>,
}

impl DiceCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            pred: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.pred[p] += 1;
            self.truth[t] += 1;
            if p == t {
                self.inter[p] += 1;
            }
        }
    }

    /// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
    pub fn dice(&self) -> Vec<f64> {
        (0..self.inter.len())
            .map(|c| {
                let den = self.pred[c] + self.truth[c];
                if den == 0 {
                    1.0
                } else {
                    2.0 * self.inter[c] as f64 / den as f64
                }
            })
            .collect()
    }

    /// Mean dice over the foreground classes `1..k`.
    pub fn mean_foreground(&self) -> f64 {
        let d = self.dice();
        if d.len() <= 1 {
            return d.first().copied().unwrap_or(1.0);
        }
        d[1..].iter().sum::<f64>() / (d.len() - 1) as f64
    }
}

/// Pixelwise mean cross-entropy and dice per class of `[n, k, h, w]` logits.
pub fn segmentation_loss_and_metric(logits: &Tensor, mask: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 4 || s[0] * s[2] * s[3] != mask.len() || mask.is_empty() {
        return Err(invalid(format!("logit maps {s:?} do not match {} mask pixels", mask.len())));
    }
    if mask.iter().any(|&l| l >= s[1]) {
        return Err(invalid("mask label outside the logit range"));
    }
    let mut counts = DiceCounts::new(s[1]);
    counts.add(&predict_masks(logits), mask);
    Ok((cross_entropy(logits, mask), counts.dice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        let l = Tensor::from_vec(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]);
        let (loss, top1) = classification_loss_and_metric(&l, &[0, 2]).unwrap();
        assert!(loss < 1e-15 && top1 == 1.0);
        let u = Tensor::zeros(&[4, 5]);
        let (loss, top1) = classification_loss_and_metric(&u, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        // ties resolve to class 0
        assert_eq!(top1, 0.25);
    }

    #[test]
    fn dice_examples() {
        let mut c = DiceCounts::new(2);
        // |P| = 4, |G| = 4, overlap 2
        c.add(&[1, 1, 1, 1, 0, 0], &[1, 1, 0, 0, 1, 1]);
        assert_eq!(c.dice()[1], 0.5);
        let mut c = DiceCounts::new(3);
        c.add(&[0, 1, 1], &[0, 1, 1]);
        assert_eq!(c.dice(), vec![1.0, 1.0, 1.0]);
        let mut c = DiceCounts::new(2);
        c.add(&[1, 1, 0, 0], &[0, 0, 1, 1]);
        assert_eq!(c.dice()[1], 0.0);
    }
}
