//! Modality energies, the energy-gap objective and the energy-descent flow.
//!
//! E(m) = α_e·mean_i ‖z_i‖² + β_e·ℓ_m + γ_e·u_m, where ℓ_m is the teacher's
//! cross-entropy and u_m its mean predictive entropy. The gap loss sums
//! (E(a) − E(b))² over unordered pairs, so ∂L_gap/∂E(m) = 2·|M|·(E(m) − Ē).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::msd::MsdNetworks;
use crate::nn::Binding;
use crate::presence::Presence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCoefficients {
    pub alpha_e: f64,
    pub beta_e: f64,
    pub gamma_e: f64,
    pub lambda_flow: f64,
    pub delta_e: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients {
            alpha_e: 1.0,
            beta_e: 1.0,
            gamma_e: 1.0,
            lambda_flow: 0.05,
            delta_e: 0.1,
        }
    }
}

impl EnergyCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_e, self.beta_e, self.gamma_e, self.lambda_flow, self.delta_e];
        if all.iter().all(|c| *c >= 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::contract(format!("energy coefficients must be non-negative, got {all:?}")))
        }
    }
}

/// Mean Shannon entropy (nats) of probability rows; 0·ln 0 = 0.
pub fn entropy_uncertainty(probs: &Tensor) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::contract("entropy of an empty batch"));
    }
    let mut total = 0.0;
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::contract(format!("row {r} is not a probability vector (sum {s})")));
        }
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(total / probs.rows() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyComponents {
    pub e_magnitude: f64,
    pub e_loss: f64,
    pub e_uncertainty: f64,
    pub e_total: f64,
}

pub fn modality_energy(c: &EnergyCoefficients, mean_norm_sq: f64, loss: f64, uncertainty: f64) -> EnergyComponents {
    let e_magnitude = c.alpha_e * mean_norm_sq;
    let e_loss = c.beta_e * loss;
    let e_uncertainty = c.gamma_e * uncertainty;
    EnergyComponents {
        e_magnitude,
        e_loss,
        e_uncertainty,
        e_total: e_magnitude + e_loss + e_uncertainty,
    }
}

pub fn loss_gap(energies: &[f64]) -> f64 {
    let mut total = 0.0;
    for a in 0..energies.len() {
        for b in a + 1..energies.len() {
            let d = energies[a] - energies[b];
            total += d * d;
        }
    }
    total
}

pub fn loss_gap_var(tape: &mut Tape, energies: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for a in 0..energies.len() {
        for b in a + 1..energies.len() {
            let d = tape.sub(energies[a], energies[b])?;
            let sq = tape.mul(d, d)?;
            total = Some(match total {
                None => sq,
                Some(t) => tape.add(t, sq)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Closed form of ∂L_gap/∂E(m): 2·Σ_{m'≠m}(E(m) − E(m')) = 2·|M|·(E(m) − Ē).
pub fn gap_gradient(energies: &[f64]) -> Vec<f64> {
    let m = energies.len() as f64;
    implicit_weights(energies).iter().map(|w| 2.0 * m * w).collect()
}

/// E(m) − Ē per modality.
pub fn implicit_weights(energies: &[f64]) -> Vec<f64> {
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    energies.iter().map(|e| e - mean).collect()
}

pub fn loss_emc(delta_e: f64, energies: &[f64], grad_norms_sq: &[f64]) -> f64 {
    loss_gap(energies) + delta_e * grad_norms_sq.iter().sum::<f64>()
}

/// Population variance of the per-modality energies.
pub fn energy_variance(energies: &[f64]) -> f64 {
    let w = implicit_weights(energies);
    w.iter().map(|d| d * d).sum::<f64>() / energies.len() as f64
}

/// One modality's row of the energy log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityEnergy {
    pub modality: String,
    pub e_magnitude: f64,
    pub e_loss: f64,
    pub e_uncertainty: f64,
    pub e_total: f64,
    pub grad_norm_sq: f64,
    pub implicit_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub modalities: Vec<ModalityEnergy>,
    pub e_mean: f64,
    pub pairwise_gaps: Vec<Vec<f64>>,
}

impl EnergyReport {
    pub fn new(names: &[String], components: &[EnergyComponents], grad_norms_sq: &[f64]) -> Self {
        let totals: Vec<f64> = components.iter().map(|c| c.e_total).collect();
        let weights = implicit_weights(&totals);
        let modalities = names
            .iter()
            .zip(components)
            .zip(grad_norms_sq)
            .zip(&weights)
            .map(|(((name, c), g), w)| ModalityEnergy {
                modality: name.clone(),
                e_magnitude: c.e_magnitude,
                e_loss: c.e_loss,
                e_uncertainty: c.e_uncertainty,
                e_total: c.e_total,
                grad_norm_sq: *g,
                implicit_weight: *w,
            })
            .collect();
        let pairwise_gaps = totals
            .iter()
            .map(|a| totals.iter().map(|b| (a - b).abs()).collect())
            .collect();
        EnergyReport {
            modalities,
            e_mean: totals.iter().sum::<f64>() / totals.len().max(1) as f64,
            pairwise_gaps,
        }
    }

    pub fn totals(&self) -> Vec<f64> {
        self.modalities.iter().map(|m| m.e_total).collect()
    }

    pub fn variance(&self) -> f64 {
        energy_variance(&self.totals())
    }
}

/// Tape-side energy quantities for one forward pass.
#[derive(Clone, Debug)]
pub struct EnergyTerms {
    /// Modalities with at least one present row, in order.
    pub modalities: Vec<usize>,
    pub energies: Vec<Var>,
    pub grad_norm_sq: Vec<Var>,
    pub components: Vec<EnergyComponents>,
    /// z − λ·∂e/∂z for every modality (absent modalities unchanged).
    pub refined: Vec<Var>,
}

impl EnergyTerms {
    pub fn loss(&self, tape: &mut Tape, delta_e: f64) -> Result<Var> {
        let gap = loss_gap_var(tape, &self.energies)?;
        let mut total = gap;
        for &g in &self.grad_norm_sq {
            let s = tape.scale(g, delta_e)?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    pub fn grad_norms(&self, tape: &Tape) -> Vec<f64> {
        self.grad_norm_sq.iter().map(|&g| tape.item(g)).collect()
    }
}

struct TeacherTerms {
    loss: Option<Var>,
    entropy: Var,
}

fn teacher_terms(
    tape: &mut Tape,
    bind: &Binding,
    nets: &MsdNetworks,
    m: usize,
    z: Var,
    rows: &[usize],
    labels: Option<&[usize]>,
) -> Result<TeacherTerms> {
    let zs = nets.specific[m].forward(tape, bind, z)?;
    let logits = nets.teacher_logits(tape, bind, m, zs)?;
    let logits = tape.gather_rows(logits, rows)?;
    let loss = match labels {
        Some(y) => {
            let y: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
            Some(tape.cross_entropy(logits, &y)?)
        }
        None => None,
    };
    let p = tape.softmax_rows(logits, 1.0)?;
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum(plogp)?;
    let entropy = tape.scale(s, -1.0 / rows.len() as f64)?;
    Ok(TeacherTerms { loss, entropy })
}

/// Energies, gradient-norm penalties and the one-step energy-descent
/// refinement for every modality.
///
/// The per-sample energy gradient is 2α_e·z_i, kept on the tape, plus
/// n_m·∂(β_e·ℓ_m + γ_e·u_m)/∂z_i evaluated on a detached copy (stop-gradient).
/// The refinement z − λ·g always uses the label-free gradient (β_e·∇ℓ
/// dropped); the gradient-norm penalty includes β_e·∇ℓ when labels are given.
pub fn energy_flow(
    tape: &mut Tape,
    bind: &Binding,
    nets: &MsdNetworks,
    z: &[Var],
    presence: &Presence,
    labels: Option<&[usize]>,
    coeffs: &EnergyCoefficients,
) -> Result<EnergyTerms> {
    coeffs.validate()?;
    let mut out = EnergyTerms {
        modalities: Vec::new(),
        energies: Vec::new(),
        grad_norm_sq: Vec::new(),
        components: Vec::new(),
        refined: z.to_vec(),
    };
    for (m, &zm) in z.iter().enumerate() {
        let rows = presence.rows_of(m);
        if rows.is_empty() {
            continue;
        }
        let np = rows.len() as f64;

        // energy value, differentiable throughout
        let sq = tape.l2_norm_sq(zm)?;
        let mag = tape.scale(sq, 1.0 / np)?;
        let terms = teacher_terms(tape, bind, nets, m, zm, &rows, labels)?;
        let mut e = tape.scale(mag, coeffs.alpha_e)?;
        if let Some(l) = terms.loss {
            let t = tape.scale(l, coeffs.beta_e)?;
            e = tape.add(e, t)?;
        }
        let t = tape.scale(terms.entropy, coeffs.gamma_e)?;
        e = tape.add(e, t)?;

        // Per-sample energy gradient. The penalty sees the full gradient;
        // the refinement only the label-free part, so training and
        // evaluation apply the same map to z and no label reaches the fused
        // prediction.
        let quad = tape.scale(zm, 2.0 * coeffs.alpha_e)?;
        let use_loss = labels.is_some() && coeffs.beta_e > 0.0;
        let free = if coeffs.gamma_e > 0.0 {
            Some(detached_gradient(tape, bind, nets, m, zm, &rows, None, coeffs, presence)?)
        } else {
            None
        };
        let full = if use_loss {
            Some(detached_gradient(tape, bind, nets, m, zm, &rows, labels, coeffs, presence)?)
        } else {
            free.clone()
        };
        let with = |tape: &mut Tape, d: Option<Tensor>| -> Result<Var> {
            match d {
                Some(d) => {
                    let c = tape.constant(d);
                    tape.add(quad, c)
                }
                None => Ok(quad),
            }
        };
        let g = with(tape, full)?;
        let gsq = tape.l2_norm_sq(g)?;
        let gns = tape.scale(gsq, 1.0 / np)?;
        if coeffs.lambda_flow > 0.0 {
            let g_flow = with(tape, free)?;
            let step = tape.scale(g_flow, coeffs.lambda_flow)?;
            out.refined[m] = tape.sub(zm, step)?;
        }

        out.components.push(modality_energy(
            coeffs,
            tape.item(mag),
            terms.loss.map_or(0.0, |l| tape.item(l)),
            tape.item(terms.entropy),
        ));
        out.modalities.push(m);
        out.energies.push(e);
        out.grad_norm_sq.push(gns);
    }
    Ok(out)
}

/// n_m·∂(β_e·ℓ_m + γ_e·u_m)/∂z on a detached copy of z, zero on absent
/// rows. Without labels only the entropy term contributes.
#[allow(clippy::too_many_arguments)]
fn detached_gradient(
    tape: &mut Tape,
    bind: &Binding,
    nets: &MsdNetworks,
    m: usize,
    zm: Var,
    rows: &[usize],
    labels: Option<&[usize]>,
    coeffs: &EnergyCoefficients,
    presence: &Presence,
) -> Result<Tensor> {
    let copy = tape.leaf(tape.value(zm).detach());
    let d = teacher_terms(tape, bind, nets, m, copy, rows, labels)?;
    let mut s = tape.scale(d.entropy, coeffs.gamma_e)?;
    if let Some(l) = d.loss {
        let t = tape.scale(l, coeffs.beta_e)?;
        s = tape.add(s, t)?;
    }
    let np = rows.len() as f64;
    let g = tape.grad_of_scalar_wrt(copy, s)?.map(|v| v * np);
    Ok(mask_tensor(g, presence, m))
}

fn mask_tensor(mut t: Tensor, presence: &Presence, m: usize) -> Tensor {
    for i in 0..t.rows() {
        if !presence.is_present(i, m) {
            t.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    t
}
