//! Confusion-matrix segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::AddAssign;

use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/label pair; pixels labelled `ignore` are skipped.
    /// Nothing is counted if any id is out of range.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![label.len()],
                actual: vec![pred.len()],
            });
        }
        let c = self.num_classes;
        for (&p, &l) in pred.iter().zip(label) {
            if l == ignore {
                continue;
            }
            for v in [p, l] {
                if v as usize >= c {
                    return Err(Error::ClassOutOfRange {
                        class: v as usize,
                        num_classes: c,
                    });
                }
            }
        }
        for (&p, &l) in pred.iter().zip(label) {
            if l != ignore {
                self.counts[l as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_classes],
                actual: vec![other.num_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn compute(&self) -> Result<MetricsReport> {
        MetricsReport::from_confusion(self)
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    /// Panics when class counts differ; use [`ConfusionMatrix::merge`] to get an error.
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        self.merge(rhs)
            .expect("confusion matrices of different sizes");
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Present in ground truth or predictions.
    pub valid: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// All values are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub m_fsc: f64,
    pub m_iou: f64,
    pub m_pre: f64,
    pub m_rec: f64,
    pub a_acc: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let total = cm.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let c = cm.num_classes;
        let mut trace = 0;
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = cm.get(k, k);
                trace += tp;
                let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
                let (fp, fn_) = (col - tp, row - tp);
                let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
                let precision = ratio(t, t + p);
                let recall = ratio(t, t + n);
                ClassMetrics {
                    tp,
                    fp,
                    fn_,
                    iou: ratio(t, t + p + n),
                    precision,
                    recall,
                    f1: ratio(2.0 * precision * recall, precision + recall),
                    valid: tp + fp + fn_ > 0,
                }
            })
            .collect();
        let valid: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.valid).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            valid.iter().map(|m| f(m)).sum::<f64>() / valid.len() as f64
        };
        Ok(Self {
            m_fsc: mean(|m| m.f1),
            m_iou: mean(|m| m.iou),
            m_pre: mean(|m| m.precision),
            m_rec: mean(|m| m.recall),
            a_acc: trace as f64 / total as f64,
            per_class,
        })
    }

    /// `(key, fraction)` pairs in report order: the five means, then
    /// `per_class.<id>.<metric>`.
    pub fn entries(&self) -> Vec<(alloc::string::String, f64)> {
        let mut out = vec![
            ("mFsc".into(), self.m_fsc),
            ("mIoU".into(), self.m_iou),
            ("aAcc".into(), self.a_acc),
            ("mPre".into(), self.m_pre),
            ("mRec".into(), self.m_rec),
        ];
        for (i, m) in self.per_class.iter().enumerate() {
            for (name, v) in [
                ("iou", m.iou),
                ("f1", m.f1),
                ("precision", m.precision),
                ("recall", m.recall),
            ] {
                out.push((alloc::format!("per_class.{i}.{name}"), v));
            }
        }
        out
    }
}

/// Spread `max − min` across repeated runs.
pub fn error_range(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::TooFewRuns(values.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}
