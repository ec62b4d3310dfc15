use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification quality with arc (label 1) as the positive class.
///
/// Precision, recall and F1 are 0 when undefined. The AUCs are `None` when
/// the labels contain a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Confusion {
    pub fn from_predictions(pred: &[u8], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_of(self.precision(), self.recall())
    }

    /// Mean of the arc-class and normal-class F1.
    pub fn macro_f1(&self) -> f64 {
        let neg_p = ratio(self.tn, self.tn + self.fn_);
        let neg_r = ratio(self.tn, self.tn + self.fp);
        (self.f1() + f1_of(neg_p, neg_r)) / 2.0
    }
}

/// Metrics for `P(arc)` scores thresholded at `threshold` (strictly greater
/// is arc).
pub fn metrics_from_scores(scores: &[f32], labels: &[u8], threshold: f64) -> Metrics {
    let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s as f64 > threshold)).collect();
    let c = Confusion::from_predictions(&pred, labels);
    let s64: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    Metrics {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        macro_f1: c.macro_f1(),
        roc_auc: auc(&s64, labels, AucKind::Roc).ok(),
        pr_auc: auc(&s64, labels, AucKind::Pr).ok(),
        confusion: c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucKind {
    Roc,
    Pr,
}

/// Area under the ROC curve (trapezoids over every distinct threshold, so
/// ties count half) or average precision (step-wise, one step per distinct
/// threshold).
pub fn auc(scores: &[f64], labels: &[u8], kind: AucKind) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        match kind {
            AucKind::Roc => {
                let dx = (fp - fp0) as f64 / neg as f64;
                area += dx * (tp + tp0) as f64 / (2.0 * pos as f64);
            }
            AucKind::Pr => {
                let dr = (tp - tp0) as f64 / pos as f64;
                area += dr * tp as f64 / (tp + fp) as f64;
            }
        }
    }
    Ok(area.clamp(0.0, 1.0))
}
