//! Direct, unoptimised metric definitions used as oracles.

/// Per-class F1 from a full confusion matrix, 2·TP / (2·TP + FP + FN).
pub fn per_class_f1(pred: &[usize], labels: &[usize], k: usize) -> Vec<f64> {
    let mut cm = vec![vec![0usize; k]; k];
    for (&p, &y) in pred.iter().zip(labels) {
        cm[y][p] += 1;
    }
    (0..k)
        .map(|c| {
            let tp = cm[c][c];
            let fp: usize = (0..k).filter(|&r| r != c).map(|r| cm[r][c]).sum();
            let fn_: usize = (0..k).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            }
        })
        .collect()
}

pub fn accuracy<T: PartialEq>(pred: &[T], labels: &[T]) -> f64 {
    let mut hits = 0.0;
    for i in 0..pred.len() {
        if pred[i] == labels[i] {
            hits += 1.0;
        }
    }
    hits / pred.len() as f64
}

pub fn macro_f1(pred: &[usize], labels: &[usize], k: usize) -> f64 {
    per_class_f1(pred, labels, k).iter().sum::<f64>() / k as f64
}

/// F1 of each of the two classes weighted by true support.
pub fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let p: Vec<usize> = pred.iter().map(|&b| b as usize).collect();
    let t: Vec<usize> = truth.iter().map(|&b| b as usize).collect();
    let f = per_class_f1(&p, &t, 2);
    let support = [t.iter().filter(|&&v| v == 0).count(), t.iter().filter(|&&v| v == 1).count()];
    (f[0] * support[0] as f64 + f[1] * support[1] as f64) / t.len() as f64
}

/// Round to nearest in [-3, 3]; exact halves go to the even neighbour.
pub fn bin7(x: f64) -> i64 {
    let x = x.clamp(-3.0, 3.0);
    let lo = x.floor();
    let frac = x - lo;
    let lo = lo as i64;
    if frac > 0.5 || (frac == 0.5 && lo % 2 != 0) {
        lo + 1
    } else {
        lo
    }
}

/// Pearson correlation via E[xy] − E[x]E[y], computed on centred inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ac: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let bc: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let cov = ac.iter().zip(&bc).map(|(x, y)| x * y).sum::<f64>() / n;
    let va = ac.iter().map(|x| x * x).sum::<f64>() / n;
    let vb = bc.iter().map(|y| y * y).sum::<f64>() / n;
    cov / (va * vb).sqrt()
}

pub struct Regression {
    pub acc2_nonneg: f64,
    pub f1_nonneg: f64,
    pub acc2_nonzero: f64,
    pub f1_nonzero: f64,
    pub acc7: f64,
    pub corr: f64,
    pub mae: f64,
}

pub fn regression(pred: &[f64], labels: &[f64]) -> Regression {
    let pos = |v: &f64| *v >= 0.0;
    let p: Vec<bool> = pred.iter().map(pos).collect();
    let t: Vec<bool> = labels.iter().map(pos).collect();
    let mut pz = Vec::new();
    let mut tz = Vec::new();
    for (x, y) in pred.iter().zip(labels) {
        if *y != 0.0 {
            pz.push(*x > 0.0);
            tz.push(*y > 0.0);
        }
    }
    let b7p: Vec<i64> = pred.iter().map(|&v| bin7(v)).collect();
    let b7t: Vec<i64> = labels.iter().map(|&v| bin7(v)).collect();
    Regression {
        acc2_nonneg: accuracy(&p, &t),
        f1_nonneg: weighted_f1(&p, &t),
        acc2_nonzero: accuracy(&pz, &tz),
        f1_nonzero: weighted_f1(&pz, &tz),
        acc7: accuracy(&b7p, &b7t),
        corr: pearson(pred, labels),
        mae: pred.iter().zip(labels).map(|(x, y)| (x - y).abs()).sum::<f64>() / pred.len() as f64,
    }
}
