//! Binary classification metrics with TSR as the positive class.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(predictions: &[u8], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
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
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 over pooled decisions of both classes.
    pub micro_f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Self {
        // Pooled over both classes every error is one false positive for one
        // class and one false negative for the other.
        let pooled_tp = c.tp + c.tn;
        let pooled_fp = c.fp + c.fn_;
        let micro_p = ratio(pooled_tp, pooled_tp + pooled_fp);
        let micro_r = ratio(pooled_tp, pooled_tp + pooled_fp);
        let micro_f1 = if micro_p + micro_r == 0.0 {
            0.0
        } else {
            2.0 * micro_p * micro_r / (micro_p + micro_r)
        };
        Metrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            micro_f1,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
        }
    }

    pub fn from_pairs(predictions: &[u8], labels: &[u8]) -> Self {
        Self::from_confusion(&Confusion::from_pairs(predictions, labels))
    }
}

/// Per-run metrics with their mean and population standard deviation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<Metrics>) -> Self {
        let n = runs.len().max(1) as f64;
        let field = |f: fn(&Metrics) -> f64| {
            let mean = runs.iter().map(f).sum::<f64>() / n;
            let var = runs.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (acc, acc_sd) = field(|m| m.accuracy);
        let (f1, f1_sd) = field(|m| m.micro_f1);
        let (pr, pr_sd) = field(|m| m.precision);
        let (re, re_sd) = field(|m| m.recall);
        MetricsReport {
            runs,
            mean: Metrics {
                accuracy: acc,
                micro_f1: f1,
                precision: pr,
                recall: re,
            },
            std: Metrics {
                accuracy: acc_sd,
                micro_f1: f1_sd,
                precision: pr_sd,
                recall: re_sd,
            },
        }
    }
}
