//! Classification and sentiment-regression metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

pub fn classification_metrics(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "metric inputs must be non-empty and equal length ({} vs {})",
            pred.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0; num_classes];
    let mut fp = vec![0; num_classes];
    let mut fn_ = vec![0; num_classes];
    let mut correct = 0;
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::contract(format!("class index out of range for {num_classes} classes")));
        }
        if p == y {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..num_classes).map(|c| f1(tp[c], fp[c], fn_[c])).collect();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
        per_class_f1,
    })
}

/// Support-weighted F1 over the two classes of a binary problem.
fn weighted_binary_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let pos = (tp + fn_) as f64;
    let neg = (tn + fp) as f64;
    (pos * f1(tp, fp, fn_) + neg * f1(tn, fn_, fp)) / (pos + neg)
}

fn binary_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Nearest-integer bin in [−3, 3], ties to even.
pub fn acc7_bin(score: f64) -> i64 {
    score.clamp(-3.0, 3.0).round_ties_even() as i64
}

/// Pearson correlation; NaN when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Both binary conventions: "non-negative" maps score ≥ 0 to positive over
/// every sample; "non-zero" drops zero-labelled samples and maps > 0 to
/// positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub acc2_nonneg: f64,
    pub f1_nonneg: f64,
    pub acc2_nonzero: f64,
    pub f1_nonzero: f64,
    pub acc7: f64,
    pub corr: f64,
    pub mae: f64,
}

pub fn regression_metrics(pred: &[f64], labels: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::contract("metric inputs must be non-empty and equal length"));
    }
    let pn: Vec<bool> = pred.iter().map(|&p| p >= 0.0).collect();
    let tn: Vec<bool> = labels.iter().map(|&y| y >= 0.0).collect();
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0.0).collect();
    let pz: Vec<bool> = kept.iter().map(|&i| pred[i] > 0.0).collect();
    let tz: Vec<bool> = kept.iter().map(|&i| labels[i] > 0.0).collect();
    let (acc2_nonzero, f1_nonzero) = if kept.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (binary_accuracy(&pz, &tz), weighted_binary_f1(&pz, &tz))
    };
    let n = pred.len() as f64;
    Ok(RegressionMetrics {
        acc2_nonneg: binary_accuracy(&pn, &tn),
        f1_nonneg: weighted_binary_f1(&pn, &tn),
        acc2_nonzero,
        f1_nonzero,
        acc7: pred
            .iter()
            .zip(labels)
            .filter(|(p, y)| acc7_bin(**p) == acc7_bin(**y))
            .count() as f64
            / n,
        corr: pearson(pred, labels),
        mae: pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetricRecord {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

impl MetricRecord {
    /// Flat (name, value) list in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        match self {
            MetricRecord::Classification(c) => {
                let mut v = vec![("accuracy".to_string(), c.accuracy), ("macro_f1".to_string(), c.macro_f1)];
                v.extend(c.per_class_f1.iter().enumerate().map(|(k, f)| (format!("f1_class{k}"), *f)));
                v
            }
            MetricRecord::Regression(r) => vec![
                ("acc2_nonneg".to_string(), r.acc2_nonneg),
                ("f1_nonneg".to_string(), r.f1_nonneg),
                ("acc2_nonzero".to_string(), r.acc2_nonzero),
                ("f1_nonzero".to_string(), r.f1_nonzero),
                ("acc7".to_string(), r.acc7),
                ("corr".to_string(), r.corr),
                ("mae".to_string(), r.mae),
            ],
        }
    }

    /// Headline accuracy: plain accuracy, or Acc-2 (non-negative convention).
    pub fn accuracy(&self) -> f64 {
        match self {
            MetricRecord::Classification(c) => c.accuracy,
            MetricRecord::Regression(r) => r.acc2_nonneg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let c = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((c.accuracy, c.macro_f1), (1.0, 1.0));
        let y = [-2.2, 0.4, 1.0, 3.0, -0.6];
        let r = regression_metrics(&y, &y).unwrap();
        assert_eq!((r.acc2_nonneg, r.acc2_nonzero, r.acc7, r.mae), (1.0, 1.0, 1.0, 0.0));
        assert!((r.corr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero_f1() {
        let c = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 3).unwrap();
        assert_eq!(c.per_class_f1[1], 0.0);
        assert_eq!(c.per_class_f1[2], 0.0);
        assert!((c.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_binary_conventions_on_zero_predictions() {
        let r = regression_metrics(&[0.0; 4], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(r.acc2_nonneg, 0.5);
        assert_eq!(r.acc2_nonzero, 0.5);
        assert!(r.corr.is_nan());
        let r = regression_metrics(&[0.5, 0.5, -0.5, 0.2], &[0.0, 1.0, -1.0, 0.0]).unwrap();
        assert_eq!(r.acc2_nonneg, 1.0);
        assert_eq!(r.acc2_nonzero, 1.0);
    }

    #[test]
    fn acc7_bins() {
        assert_eq!(acc7_bin(2.6), 3);
        assert_eq!(acc7_bin(-0.4), 0);
        assert_eq!(acc7_bin(7.0), 3);
        assert_eq!(acc7_bin(-3.4), -3);
        assert_eq!(acc7_bin(0.5), 0);
        assert_eq!(acc7_bin(1.5), 2);
    }
}
