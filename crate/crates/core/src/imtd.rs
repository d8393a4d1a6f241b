//! Per-sample teacher trust and the confidence-weighted distillation loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};
use crate::presence::Presence;
use crate::rng::{gaussian_tensor, rng_for};

/// Floor on ‖σ²‖₁ so the reliability 1/ln(1 + ‖σ²‖₁) stays finite.
pub const RELIABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_kd: f64,
    pub mc_passes: usize,
    pub mc_noise: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_kd: 2.0,
            mc_passes: 8,
            mc_noise: 0.05,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_kd > 0.0) {
            return Err(Error::contract(format!("distillation temperature must be positive, got {}", self.tau_kd)));
        }
        if self.mc_passes < 2 {
            return Err(Error::contract(format!("need at least 2 MC passes, got {}", self.mc_passes)));
        }
        if !(self.mc_noise >= 0.0) {
            return Err(Error::contract("MC input noise must be non-negative"));
        }
        Ok(())
    }
}

/// Mean prediction and its spread across stochastic passes.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStats {
    pub mean_probs: Tensor,
    /// Per-class variance across passes, n×K.
    pub variance: Tensor,
    /// Mean of each row of `variance`.
    pub sigma: Vec<f64>,
}

impl TeacherStats {
    /// ‖σ²‖₁ per sample: the sum of the per-class variances.
    pub fn variance_l1(&self) -> Vec<f64> {
        (0..self.variance.rows()).map(|i| self.variance.row(i).iter().sum()).collect()
    }
}

/// Population statistics over per-pass probability matrices.
pub fn pass_statistics(passes: &[Tensor]) -> Result<TeacherStats> {
    if passes.len() < 2 {
        return Err(Error::contract(format!("need at least 2 passes, got {}", passes.len())));
    }
    let (n, k) = passes[0].shape();
    if let Some(p) = passes.iter().find(|p| p.shape() != (n, k)) {
        return Err(Error::Dimension {
            op: "pass_statistics",
            left: (n, k),
            right: p.shape(),
        });
    }
    let count = passes.len() as f64;
    let mean = Tensor::from_fn(n, k, |i, j| passes.iter().map(|p| p.get(i, j)).sum::<f64>() / count);
    // pairwise form: exactly zero when every pass agrees
    let variance = Tensor::from_fn(n, k, |i, j| {
        let mut s = 0.0;
        for a in passes {
            for b in passes {
                s += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        s / (2.0 * count * count)
    });
    let sigma = (0..n).map(|i| variance.row(i).iter().sum::<f64>() / k as f64).collect();
    Ok(TeacherStats {
        mean_probs: mean,
        variance,
        sigma,
    })
}

/// Monte-Carlo statistics of a frozen teacher under Gaussian input noise.
pub fn teacher_statistics(
    store: &ParamStore,
    teacher: &Mlp,
    z_s: &Tensor,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TeacherStats> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "imtd/mc");
    let mut passes = Vec::with_capacity(cfg.mc_passes);
    for _ in 0..cfg.mc_passes {
        let input = if cfg.mc_noise > 0.0 {
            let noise = gaussian_tensor(&mut rng, z_s.rows(), z_s.cols(), cfg.mc_noise);
            z_s.zip_with(&noise, |a, b| a + b)?
        } else {
            z_s.clone()
        };
        passes.push(teacher.forward_detached(store, &input)?.softmax_rows(1.0));
    }
    pass_statistics(&passes)
}

pub fn confidence(sigma: f64) -> f64 {
    (-sigma).exp()
}

pub fn reliability(variance_l1: f64) -> f64 {
    1.0 / (1.0 + variance_l1.max(RELIABILITY_FLOOR)).ln()
}

/// (σ, c, ρ, α) for every sample and modality, n×|M| row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustWeights {
    pub rows: usize,
    pub modalities: usize,
    pub sigma: Vec<f64>,
    pub confidence: Vec<f64>,
    pub reliability: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl TrustWeights {
    pub fn alpha(&self, row: usize, modality: usize) -> f64 {
        self.alpha[row * self.modalities + modality]
    }

    /// n×1 column of α for one modality.
    pub fn alpha_column(&self, modality: usize) -> Tensor {
        Tensor::from_fn(self.rows, 1, |i, _| self.alpha(i, modality))
    }
}

/// Builds trust weights from per-modality σ and ‖σ²‖₁ vectors; α is the
/// product c·ρ normalized over the sample's present modalities.
pub fn trust_weights(sigmas: &[Vec<f64>], variance_l1: &[Vec<f64>], presence: &Presence) -> Result<TrustWeights> {
    let (n, mm) = (presence.rows(), presence.modalities());
    if sigmas.len() != mm || variance_l1.len() != mm {
        return Err(Error::contract("one sigma vector per modality is required"));
    }
    let mut w = TrustWeights {
        rows: n,
        modalities: mm,
        sigma: vec![0.0; n * mm],
        confidence: vec![0.0; n * mm],
        reliability: vec![0.0; n * mm],
        alpha: vec![0.0; n * mm],
    };
    for i in 0..n {
        if presence.count(i) == 0 {
            return Err(Error::contract(format!("sample {i} has no present modality")));
        }
        let mut total = 0.0;
        for m in 0..mm {
            let s = sigmas[m][i];
            if !(s >= 0.0) {
                return Err(Error::contract(format!("negative sigma {s} for sample {i}")));
            }
            let k = i * mm + m;
            w.sigma[k] = s;
            w.confidence[k] = confidence(s);
            w.reliability[k] = reliability(variance_l1[m][i]);
            if presence.is_present(i, m) {
                w.alpha[k] = w.confidence[k] * w.reliability[k];
                total += w.alpha[k];
            }
        }
        for m in 0..mm {
            w.alpha[i * mm + m] /= total;
        }
    }
    Ok(w)
}

/// KL(p ‖ q) in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// (1/n) Σ_i Σ_m α_m^i · KL(softmax(s_i/τ) ‖ softmax(t_{m,i}/τ)), teacher side
/// constant.
pub fn loss_imtd(
    tape: &mut Tape,
    weights: &TrustWeights,
    student_logits: Var,
    teacher_logits: &[Tensor],
    tau_kd: f64,
) -> Result<Var> {
    if !(tau_kd > 0.0) {
        return Err(Error::contract(format!("distillation temperature must be positive, got {tau_kd}")));
    }
    let (n, k) = tape.shape(student_logits);
    if n != weights.rows || teacher_logits.len() != weights.modalities {
        return Err(Error::contract("trust weights do not match the student batch"));
    }
    let p = tape.softmax_rows(student_logits, tau_kd)?;
    let logp = tape.log_softmax_rows(student_logits, tau_kd)?;
    let mut total: Option<Var> = None;
    for (m, t) in teacher_logits.iter().enumerate() {
        if t.shape() != (n, k) {
            return Err(Error::Dimension {
                op: "loss_imtd",
                left: (n, k),
                right: t.shape(),
            });
        }
        let alpha = weights.alpha_column(m);
        if alpha.data().iter().all(|&a| a == 0.0) {
            continue;
        }
        let mut logq = t.map(|v| v / tau_kd);
        for r in 0..n {
            let lse = crate::autodiff::logsumexp(logq.row(r).iter().copied());
            logq.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        let logq = tape.constant(logq);
        let diff = tape.sub(logp, logq)?;
        let prod = tape.mul(p, diff)?;
        let kl = tape.sum_rows(prod)?;
        let alpha = tape.constant(alpha);
        let weighted = tape.mul(kl, alpha)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    tape.scale(total, 1.0 / n as f64)
}

/// Per-modality means of σ, c, ρ and α over present samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrustSummary {
    pub modality: String,
    pub mean_sigma: f64,
    pub mean_c: f64,
    pub mean_rho: f64,
    pub mean_alpha: f64,
    pub count: usize,
}

pub fn summarize(weights: &TrustWeights, presence: &Presence, names: &[String]) -> Vec<TrustSummary> {
    names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let mut s = TrustSummary {
                modality: name.clone(),
                ..Default::default()
            };
            for i in presence.rows_of(m) {
                let k = i * weights.modalities + m;
                s.mean_sigma += weights.sigma[k];
                s.mean_c += weights.confidence[k];
                s.mean_rho += weights.reliability[k];
                s.mean_alpha += weights.alpha[k];
                s.count += 1;
            }
            if s.count > 0 {
                let c = s.count as f64;
                s.mean_sigma /= c;
                s.mean_c /= c;
                s.mean_rho /= c;
                s.mean_alpha /= c;
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn pass_statistics_fixtures() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let s = pass_statistics(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.sigma, vec![0.25]);
        assert_eq!(s.variance.data(), &[0.25, 0.25]);
        assert_eq!(pass_statistics(&[b.clone(), a.clone()]).unwrap().sigma, s.sigma);
        assert!(pass_statistics(&[a]).is_err());
    }

    #[test]
    fn zero_noise_gives_full_confidence() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "t");
        let teacher = Mlp::new(&mut store, &mut rng, "t", 3, 4, 2);
        let z = gaussian_tensor(&mut rng, 5, 3, 1.0);
        let cfg = DistillConfig {
            mc_noise: 0.0,
            ..Default::default()
        };
        let s = teacher_statistics(&store, &teacher, &z, &cfg, 3).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert!(s.sigma.iter().all(|&v| confidence(v) == 1.0));
        let bad = DistillConfig {
            mc_passes: 1,
            ..Default::default()
        };
        assert!(matches!(teacher_statistics(&store, &teacher, &z, &bad, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn reliability_fixture() {
        assert!((reliability(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-12);
        assert!(reliability(0.0).is_finite());
    }

    #[test]
    fn symmetric_modalities_share_weight_and_missing_get_zero() {
        let p = Presence::new(2, 3, vec![true, true, true, true, false, true]).unwrap();
        let w = trust_weights(&[vec![0.1; 2], vec![0.1; 2], vec![0.1; 2]], &[vec![0.3; 2], vec![0.3; 2], vec![0.3; 2]], &p)
            .unwrap();
        for m in 0..3 {
            assert!((w.alpha(0, m) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(w.alpha(1, 1), 0.0);
        assert!((w.alpha(1, 0) - 0.5).abs() < 1e-12);
        let none = Presence::new(1, 2, vec![false, false]).unwrap();
        assert!(trust_weights(&[vec![0.0], vec![0.0]], &[vec![0.0], vec![0.0]], &none).is_err());
    }

    #[test]
    fn higher_sigma_lowers_own_weight() {
        let p = Presence::all(1, 3);
        let mut rng = rng_for(2, "mono");
        for _ in 0..200 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            let l1 = vec![vec![0.5]; 3];
            let base = trust_weights(&[vec![s[0]], vec![s[1]], vec![s[2]]], &l1, &p).unwrap();
            let bumped = trust_weights(&[vec![s[0] + 0.3], vec![s[1]], vec![s[2]]], &l1, &p).unwrap();
            assert!(bumped.alpha(0, 0) < base.alpha(0, 0));
            assert!(bumped.alpha(0, 1) > base.alpha(0, 1));
            assert!(bumped.alpha(0, 2) > base.alpha(0, 2));
            assert!((base.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn one_hot_weights(n: usize, mm: usize, m: usize) -> TrustWeights {
        let mut alpha = vec![0.0; n * mm];
        for i in 0..n {
            alpha[i * mm + m] = 1.0;
        }
        TrustWeights {
            rows: n,
            modalities: mm,
            sigma: vec![0.0; n * mm],
            confidence: vec![1.0; n * mm],
            reliability: vec![1.0; n * mm],
            alpha,
        }
    }

    #[test]
    fn kl_fixture() {
        // softened student [0.5, 0.5], teacher [0.75, 0.25]
        let tau = 2.0;
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(1, 2));
        let t = Tensor::from_rows(&[[tau * 3f64.ln(), 0.0]]).unwrap();
        let l = loss_imtd(&mut tape, &one_hot_weights(1, 1, 0), s, &[t], tau).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((tape.item(l) - expected).abs() < 1e-9);
        assert!((expected - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn self_divergence_is_zero_and_single_weight_picks_one_term() {
        let mut rng = rng_for(3, "kl");
        let logits = gaussian_tensor(&mut rng, 4, 3, 1.0);
        let other = gaussian_tensor(&mut rng, 4, 3, 1.0);
        let mut tape = Tape::new();
        let s = tape.constant(logits.clone());
        let p = Presence::all(4, 2);
        let w = trust_weights(&[vec![0.2; 4], vec![0.5; 4]], &[vec![0.1; 4], vec![0.4; 4]], &p).unwrap();
        let l = loss_imtd(&mut tape, &w, s, &[logits.clone(), logits.clone()], 2.0).unwrap();
        assert!(tape.item(l).abs() < 1e-12);

        let l = loss_imtd(&mut tape, &one_hot_weights(4, 2, 1), s, &[logits.clone(), other.clone()], 2.0).unwrap();
        let ps = logits.softmax_rows(2.0);
        let qs = other.softmax_rows(2.0);
        let direct = (0..4).map(|i| kl_divergence(ps.row(i), qs.row(i))).sum::<f64>() / 4.0;
        assert!((tape.item(l) - direct).abs() < 1e-12);
        assert!(tape.item(l) > 0.0);
        assert!(loss_imtd(&mut tape, &w, s, &[logits.clone(), other], 0.0).is_err());
    }

    #[test]
    fn imtd_passes_grad_check_wrt_student() {
        for seed in 0..20u64 {
            let mut rng = rng_for(seed, "imtd-gc");
            let x = gaussian_tensor(&mut rng, 4, 3, 1.5);
            let teachers: Vec<Tensor> = (0..3).map(|_| gaussian_tensor(&mut rng, 4, 3, 1.5)).collect();
            let mut flags = vec![true; 12];
            flags[(seed as usize % 4) * 3 + 1] = false;
            let p = Presence::new(4, 3, flags).unwrap();
            let sig: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(0.0..0.3)).collect()).collect();
            let w = trust_weights(&sig, &sig, &p).unwrap();
            let err = grad_check(|tape, x| loss_imtd(tape, &w, x, &teachers, 2.0), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
