//! Synthetic multimodal benchmark with a known generative model.
//!
//! Each modality emits `snr_m · μ_{m,y} + ε` with isotropic Gaussian noise,
//! so the exact class posterior is available and [`bayes_accuracy`] gives
//! the accuracy ceiling for any subset of modalities.

mod io;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_for};

pub use io::{read_batch_dir, write_batch_dir};

/// Whether targets are class indices or bounded sentiment-style scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub snr: f64,
    pub noise_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub samples_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: TaskMode,
}

/// Score jitter in regression mode.
pub const SCORE_JITTER: f64 = 0.1;

impl GeneratorSpec {
    /// Text-dominant default: one strong modality, two weak ones.
    pub fn default_imbalanced(seed: u64) -> Self {
        let m = |name: &str, dim, snr| ModalitySpec {
            name: name.to_string(),
            dim,
            snr,
            noise_scale: 1.0,
        };
        GeneratorSpec {
            num_classes: 4,
            modalities: vec![m("text", 16, 2.0), m("visual", 8, 0.6), m("audio", 8, 0.6)],
            samples_per_class: 500,
            seed,
            mode: TaskMode::Classification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("at least two classes are required"));
        }
        if self.modalities.len() < 2 {
            return Err(Error::contract("at least two modalities are required"));
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::contract("modality names must be unique"));
        }
        for m in &self.modalities {
            if m.name.is_empty() || m.name.contains([',', '+', '.']) {
                return Err(Error::contract(format!("invalid modality name {:?}", m.name)));
            }
            if m.dim < 2 {
                return Err(Error::contract(format!("modality {} needs dim >= 2", m.name)));
            }
            if m.dim + 1 < self.num_classes {
                return Err(Error::contract(format!(
                    "modality {} has dim {} but {} classes need dim >= {}",
                    m.name,
                    m.dim,
                    self.num_classes,
                    self.num_classes - 1
                )));
            }
            if !(m.snr >= 0.0) || !m.snr.is_finite() {
                return Err(Error::contract(format!("modality {} snr must be >= 0", m.name)));
            }
            if !(m.noise_scale > 0.0) || !m.noise_scale.is_finite() {
                return Err(Error::contract(format!(
                    "modality {} noise_scale must be > 0",
                    m.name
                )));
            }
        }
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::contract(format!("unknown modality {name:?}")))
    }

    pub fn train_size(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    /// Unit-norm class means per modality (K × d_m): simplex corners with
    /// pairwise inner product −1/(K−1), embedded and rotated by a seeded
    /// orthogonal map.
    pub fn class_means(&self) -> Vec<Tensor> {
        let k = self.num_classes;
        let simplex = simplex_coordinates(k);
        self.modalities
            .iter()
            .map(|m| {
                let rot = random_orthogonal(m.dim, self.seed, &format!("means/{}", m.name));
                let padded = Tensor::from_fn(k, m.dim, |r, c| if c < k - 1 { simplex.get(r, c) } else { 0.0 });
                padded.matmul(&rot).expect("rotation shape")
            })
            .collect()
    }
}

/// K simplex corners in K−1 dimensions, unit norm.
fn simplex_coordinates(k: usize) -> Tensor {
    // corner v_y = (e_y − 1/K) / sqrt((K−1)/K), expressed in the Helmert basis
    // of the sum-zero subspace.
    let scale = ((k as f64 - 1.0) / k as f64).sqrt();
    Tensor::from_fn(k, k - 1, |y, j| {
        let j1 = j + 1;
        let norm = ((j1 * (j1 + 1)) as f64).sqrt();
        // basis h_j: 1 on coordinates 0..j1, −j1 on coordinate j1
        let e_dot = if y < j1 {
            1.0
        } else if y == j1 {
            -(j1 as f64)
        } else {
            0.0
        };
        // the 1/K component is orthogonal to every h_j
        e_dot / norm / scale
    })
}

/// d×d orthogonal matrix from Gram–Schmidt on a seeded Gaussian matrix.
fn random_orthogonal(d: usize, seed: u64, stream: &str) -> Tensor {
    let mut rng = rng_for(seed, stream);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        for q in &rows {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
    }
    Tensor::from_rows(&rows).expect("square")
}

/// Per-modality features, targets and masks for n samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub modalities: Vec<String>,
    pub features: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub scores: Option<Vec<f64>>,
    /// n × |M|, row-major.
    pub present: Vec<bool>,
    /// Per modality n × d_m, true where the entry is observed.
    pub feature_mask: Vec<Vec<bool>>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::contract(format!("unknown modality {name:?}")))
    }

    pub fn is_present(&self, sample: usize, modality: usize) -> bool {
        self.present[sample * self.modalities.len() + modality]
    }

    pub fn present_count(&self, sample: usize) -> usize {
        let m = self.modalities.len();
        self.present[sample * m..(sample + 1) * m].iter().filter(|&&p| p).count()
    }

    /// Indices of samples where `modality` is present.
    pub fn present_rows(&self, modality: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_present(i, modality)).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let m = self.modalities.len();
        if self.features.len() != m || self.feature_mask.len() != m || self.present.len() != n * m {
            return Err(Error::contract("batch modality bookkeeping is inconsistent"));
        }
        if let Some(s) = &self.scores {
            if s.len() != n {
                return Err(Error::contract("score count differs from sample count"));
            }
        }
        for (k, f) in self.features.iter().enumerate() {
            if f.rows() != n || self.feature_mask[k].len() != f.len() {
                return Err(Error::contract(format!(
                    "modality {} has {} rows, expected {n}",
                    self.modalities[k],
                    f.rows()
                )));
            }
            for i in 0..n {
                if !self.is_present(i, k) {
                    let d = f.cols();
                    let zero_row = f.row(i).iter().all(|&v| v == 0.0);
                    let mask_off = self.feature_mask[k][i * d..(i + 1) * d].iter().all(|&b| !b);
                    if !zero_row || !mask_off {
                        return Err(Error::contract(format!(
                            "sample {i} lacks modality {} but its row is not cleared",
                            self.modalities[k]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sub-batch with the given sample order.
    pub fn select(&self, indices: &[usize]) -> MultimodalBatch {
        let m = self.modalities.len();
        MultimodalBatch {
            modalities: self.modalities.clone(),
            features: self.features.iter().map(|f| f.select_rows(indices)).collect(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            scores: self
                .scores
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            present: indices
                .iter()
                .flat_map(|&i| self.present[i * m..(i + 1) * m].iter().copied())
                .collect(),
            feature_mask: self
                .features
                .iter()
                .zip(&self.feature_mask)
                .map(|(f, mask)| {
                    let d = f.cols();
                    indices
                        .iter()
                        .flat_map(|&i| mask[i * d..(i + 1) * d].iter().copied())
                        .collect()
                })
                .collect(),
        }
    }

    fn clear_modality(&mut self, sample: usize, modality: usize) {
        let m = self.modalities.len();
        self.present[sample * m + modality] = false;
        let d = self.features[modality].cols();
        self.features[modality].row_mut(sample).iter_mut().for_each(|v| *v = 0.0);
        self.feature_mask[modality][sample * d..(sample + 1) * d]
            .iter_mut()
            .for_each(|b| *b = false);
    }
}

/// Training split of size `n`.
pub fn generate(spec: &GeneratorSpec, n: usize) -> Result<MultimodalBatch> {
    generate_split(spec, n, "train")
}

/// Independent split drawn from the same class geometry. Different split
/// names give independent noise.
pub fn generate_split(spec: &GeneratorSpec, n: usize, split: &str) -> Result<MultimodalBatch> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(Error::contract(format!(
            "need at least {} samples for {} classes, got {n}",
            spec.num_classes, spec.num_classes
        )));
    }
    let k = spec.num_classes;
    let classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    let means = spec.class_means();
    let mut rng = rng_for(spec.seed, &format!("samples/{split}"));
    let mut features = Vec::with_capacity(spec.modalities.len());
    for (m, mu) in spec.modalities.iter().zip(&means) {
        let mut x = Tensor::zeros(n, m.dim);
        for (i, &y) in classes.iter().enumerate() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = m.snr * mu.get(y, j) + m.noise_scale * gaussian(&mut rng);
            }
        }
        features.push(x);
    }
    let scores = match spec.mode {
        TaskMode::Classification => None,
        TaskMode::Regression => {
            let mut rng = rng_for(spec.seed, &format!("scores/{split}"));
            Some(
                classes
                    .iter()
                    .map(|&y| {
                        let base = -3.0 + 6.0 * y as f64 / (k as f64 - 1.0);
                        (base + SCORE_JITTER * gaussian(&mut rng)).clamp(-3.0, 3.0)
                    })
                    .collect(),
            )
        }
    };
    let feature_mask = spec.modalities.iter().map(|m| vec![true; n * m.dim]).collect();
    Ok(MultimodalBatch {
        modalities: spec.modality_names(),
        features,
        classes,
        scores,
        present: vec![true; n * spec.modalities.len()],
        feature_mask,
    })
}

fn subset_indices(batch: &MultimodalBatch, subset: &[&str]) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::contract("modality subset must be non-empty"));
    }
    let mut idx = subset
        .iter()
        .map(|name| batch.modality_index(name))
        .collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Keeps only the named modalities; the rest are zeroed and marked absent.
pub fn apply_modality_missing(batch: &MultimodalBatch, subset: &[&str]) -> Result<MultimodalBatch> {
    let keep = subset_indices(batch, subset)?;
    let mut out = batch.clone();
    for m in 0..batch.num_modalities() {
        if !keep.contains(&m) {
            for i in 0..batch.len() {
                out.clear_modality(i, m);
            }
        }
    }
    Ok(out)
}

/// Drops whole modalities per sample with probability `rate`, never
/// removing a sample's last present modality.
pub fn apply_random_modality_missing(batch: &MultimodalBatch, rate: f64, seed: u64) -> Result<MultimodalBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("missing rate must lie in [0, 1), got {rate}")));
    }
    let mut rng = rng_for(seed, "modality-missing");
    let mut out = batch.clone();
    for i in 0..batch.len() {
        for m in 0..batch.num_modalities() {
            let drop = rng.random::<f64>() < rate;
            if drop && out.is_present(i, m) && out.present_count(i) > 1 {
                out.clear_modality(i, m);
            }
        }
    }
    Ok(out)
}

/// Zeroes each feature entry independently with probability `rate`.
pub fn apply_feature_dropout(batch: &MultimodalBatch, rate: f64, seed: u64) -> Result<MultimodalBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let mut out = batch.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, "feature-dropout");
    for (f, mask) in out.features.iter_mut().zip(out.feature_mask.iter_mut()) {
        for (v, keep) in f.data_mut().iter_mut().zip(mask.iter_mut()) {
            if rng.random::<f64>() < rate {
                *v = 0.0;
                *keep = false;
            }
        }
    }
    Ok(out)
}

/// Accuracy ceiling per modality subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesOracleReport {
    pub bayes_accuracy_full: f64,
    /// Keyed by modality names joined with `+`, in batch order.
    pub bayes_accuracy_per_subset: BTreeMap<String, f64>,
}

pub fn subset_key(names: &[&str]) -> String {
    names.join("+")
}

/// Accuracy of the exact argmax-posterior classifier using only `subset`,
/// observed entries, and present modalities.
pub fn bayes_accuracy(spec: &GeneratorSpec, batch: &MultimodalBatch, subset: &[&str]) -> Result<f64> {
    let keep = subset_indices(batch, subset)?;
    let posteriors = bayes_log_likelihoods(spec, batch, &keep)?;
    let correct = posteriors
        .iter()
        .zip(&batch.classes)
        .filter(|(ll, &y)| argmax(ll) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Unnormalised class log-posteriors (uniform prior) per sample.
pub fn bayes_log_likelihoods(spec: &GeneratorSpec, batch: &MultimodalBatch, modalities: &[usize]) -> Result<Vec<Vec<f64>>> {
    if batch.modalities != spec.modality_names() {
        return Err(Error::contract("batch modalities do not match generator spec"));
    }
    let means = spec.class_means();
    let k = spec.num_classes;
    let mut out = vec![vec![0.0; k]; batch.len()];
    for &m in modalities {
        let ms = &spec.modalities[m];
        let x = &batch.features[m];
        let d = x.cols();
        let var2 = 2.0 * ms.noise_scale * ms.noise_scale;
        for (i, ll) in out.iter_mut().enumerate() {
            if !batch.is_present(i, m) {
                continue;
            }
            let mask = &batch.feature_mask[m][i * d..(i + 1) * d];
            for (y, l) in ll.iter_mut().enumerate() {
                let mut sq = 0.0;
                for j in 0..d {
                    if mask[j] {
                        let diff = x.get(i, j) - ms.snr * means[m].get(y, j);
                        sq += diff * diff;
                    }
                }
                *l -= sq / var2;
            }
        }
    }
    Ok(out)
}

/// Ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// All non-empty modality subsets in bitmask order.
pub fn nonempty_subsets(names: &[String]) -> Vec<Vec<&str>> {
    let m = names.len();
    (1u32..(1 << m))
        .map(|mask| {
            (0..m)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| names[i].as_str())
                .collect()
        })
        .collect()
}

pub fn bayes_oracle(spec: &GeneratorSpec, batch: &MultimodalBatch) -> Result<BayesOracleReport> {
    let names = spec.modality_names();
    let mut per_subset = BTreeMap::new();
    for subset in nonempty_subsets(&names) {
        per_subset.insert(subset_key(&subset), bayes_accuracy(spec, batch, &subset)?);
    }
    let all: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(BayesOracleReport {
        bayes_accuracy_full: per_subset[&subset_key(&all)],
        bayes_accuracy_per_subset: per_subset,
    })
}

#[cfg(test)]
mod tests;
