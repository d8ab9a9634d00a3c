//! Detection and labeling metrics.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// `2PR / (P + R)` over boolean step flags; 0 when `P + R = 0`.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> Result<f64> {
    let c = FlagCounts::from_flags(pred, truth)?;
    Ok(c.f1())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl FlagCounts {
    pub fn from_flags(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(HarnessError::Validation(format!(
                "prediction length {} differs from truth length {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = FlagCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: FlagCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Rows are truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_vocabulary: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_vocabulary: Vec<String>) -> Self {
        let k = class_vocabulary.len();
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
            class_vocabulary,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(HarnessError::Validation(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(ConfusionMatrix {
            counts,
            class_vocabulary: (0..k).map(|i| i.to_string()).collect(),
        })
    }

    pub fn record(&mut self, truth: &str, pred: &str) -> Result<()> {
        let idx = |l: &str| {
            self.class_vocabulary
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| HarnessError::Validation(format!("label {l:?} not in vocabulary")))
        };
        let (t, p) = (idx(truth)?, idx(pred)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let k = self.counts.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
                let actual: u64 = self.counts[c].iter().sum();
                ClassMetrics {
                    class: self.class_vocabulary[c].clone(),
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, actual),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
}

/// Overall accuracy and Cohen's kappa.
pub fn oa_kappa(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(HarnessError::Validation(
            "confusion matrix has no counts".into(),
        ));
    }
    let n = total as f64;
    let k = cm.counts.len();
    let trace: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    let oa = trace as f64 / n;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: u64 = cm.counts[i].iter().sum();
            let col: u64 = (0..k).map(|r| cm.counts[r][i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return Err(HarnessError::Validation("degenerate marginals".into()));
    }
    Ok((oa, (oa - pe) / (1.0 - pe)))
}

/// Steps counted positive for relabeling: the label moved away from the
/// anchor. A predicted positive is a hit only when it matches the truth.
pub fn relabel_counts(pred: &[String], truth: &[String], anchor: &str) -> Result<FlagCounts> {
    if pred.len() != truth.len() {
        return Err(HarnessError::Validation(
            "label sequences differ in length".into(),
        ));
    }
    let mut c = FlagCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        let (pp, tp) = (p != anchor, t != anchor);
        match (pp, tp) {
            (true, _) if p == t => c.tp += 1,
            (true, true) => {
                c.fp += 1;
                c.fn_ += 1;
            }
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}
