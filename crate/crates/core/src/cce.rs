//! Cross-modal enhancement of each modality from the others' components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse_predict, loss_task, FusionNetworks, Targets};
use crate::model::ModelDims;
use crate::msd::DisentangledRep;
use crate::nn::{Binding, Mlp, ParamStore};
use crate::presence::Presence;
use crate::rng::{gaussian_tensor, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CceConfig {
    pub gamma: f64,
    pub noise_scale: f64,
}

impl Default for CceConfig {
    fn default() -> Self {
        CceConfig {
            gamma: 0.1,
            noise_scale: 0.1,
        }
    }
}

/// One generator per modality: [z_c, mean others' z_c, mean others' z_s, ε] → h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CceNetworks {
    pub generators: Vec<Mlp>,
    pub noise_dim: usize,
}

impl CceNetworks {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, modalities: &[String], dims: &ModelDims) -> Self {
        let input = 2 * dims.shared + dims.specific + dims.noise_dim;
        CceNetworks {
            generators: modalities
                .iter()
                .map(|name| Mlp::new(store, rng, &format!("cce.{name}"), input, dims.hidden, dims.rep))
                .collect(),
            noise_dim: dims.noise_dim,
        }
    }
}

/// Enhanced representations and, per modality, the rows that were enhanced.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub z_tilde: Vec<Var>,
    pub rows: Vec<Vec<usize>>,
}

/// Mean over the other present modalities, zero where none is present.
fn others_mean(tape: &mut Tape, parts: &[Var], m: usize, presence: &Presence) -> Result<Var> {
    let (_, w) = tape.shape(parts[0]);
    let mut acc: Option<Var> = None;
    for (k, &p) in parts.iter().enumerate().filter(|&(k, _)| k != m) {
        let weight = presence.row_tensor(w, |i| {
            let others = presence.others(i, m);
            if presence.is_present(i, k) && others > 0 {
                1.0 / others as f64
            } else {
                0.0
            }
        });
        let weight = tape.constant(weight);
        let term = tape.mul(p, weight)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::contract("enhancement needs at least two modalities"))
}

/// z̃_m = G_m(z_c_m, mean z_c of others, mean z_s of others, ε) on rows where
/// modality m and at least one other modality are present; z̃_m = z_m elsewhere.
pub fn enhance(
    tape: &mut Tape,
    bind: &Binding,
    nets: &CceNetworks,
    reps: &[DisentangledRep],
    presence: &Presence,
    noise_scale: f64,
    seed: u64,
) -> Result<Enhanced> {
    let n = presence.rows();
    let shared: Vec<Var> = reps.iter().map(|r| r.z_c).collect();
    let specific: Vec<Var> = reps.iter().map(|r| r.z_s).collect();
    let mut out = Enhanced {
        z_tilde: Vec::with_capacity(reps.len()),
        rows: Vec::with_capacity(reps.len()),
    };
    for (m, rep) in reps.iter().enumerate() {
        let rows: Vec<usize> = (0..n)
            .filter(|&i| presence.is_present(i, m) && presence.others(i, m) > 0)
            .collect();
        if rows.is_empty() {
            out.z_tilde.push(rep.z);
            out.rows.push(rows);
            continue;
        }
        let oc = others_mean(tape, &shared, m, presence)?;
        let os = others_mean(tape, &specific, m, presence)?;
        let eps = if noise_scale > 0.0 {
            let mut rng = rng_for(seed, &format!("cce/{m}"));
            gaussian_tensor(&mut rng, n, nets.noise_dim, noise_scale)
        } else {
            Tensor::zeros(n, nets.noise_dim)
        };
        let eps = tape.constant(eps);
        let input = tape.concat_cols(&[rep.z_c, oc, os, eps])?;
        let g = nets.generators[m].forward(tape, bind, input)?;
        let z_tilde = if rows.len() == n {
            g
        } else {
            let (_, h) = tape.shape(g);
            let on = presence.row_tensor(h, |i| f64::from(u8::from(rows.binary_search(&i).is_ok())));
            let off = on.map(|v| 1.0 - v);
            let on = tape.constant(on);
            let off = tape.constant(off);
            let a = tape.mul(g, on)?;
            let b = tape.mul(rep.z, off)?;
            tape.add(a, b)?
        };
        out.z_tilde.push(z_tilde);
        out.rows.push(rows);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CceLossParts {
    pub l_rec: f64,
    pub l_task_enh: f64,
    pub l_cce: f64,
    pub gamma_cce: f64,
}

impl CceLossParts {
    pub fn new(l_rec: f64, l_task_enh: f64, gamma_cce: f64) -> Self {
        CceLossParts {
            l_rec,
            l_task_enh,
            l_cce: l_rec + gamma_cce * l_task_enh,
            gamma_cce,
        }
    }
}

pub struct CceTerms {
    pub l_rec: Var,
    pub l_task_enh: Var,
    pub l_cce: Var,
}

impl CceTerms {
    pub fn parts(&self, tape: &Tape, gamma: f64) -> CceLossParts {
        CceLossParts::new(tape.item(self.l_rec), tape.item(self.l_task_enh), gamma)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// l_rec: mean over modalities of the mean squared distance ‖z̃_m − z_m‖² on
/// enhanced rows. l_task_enh: mean over modalities of the task loss when the
/// fusion head sees z̃_m in slot m and raw representations elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn loss_cce(
    tape: &mut Tape,
    bind: &Binding,
    enhanced: &Enhanced,
    reps: &[DisentangledRep],
    fusion: &FusionNetworks,
    presence: &Presence,
    targets: Targets<'_>,
    gamma: f64,
) -> Result<CceTerms> {
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("enhancement task weight must be non-negative, got {gamma}")));
    }
    let raw: Vec<Var> = reps.iter().map(|r| r.z).collect();
    let shared: Vec<Var> = reps.iter().map(|r| r.z_c).collect();
    let mut rec = Vec::new();
    let mut task = Vec::new();
    for (m, rows) in enhanced.rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let diff = tape.sub(enhanced.z_tilde[m], raw[m])?;
        let diff = tape.gather_rows(diff, rows)?;
        let sq = tape.l2_norm_sq(diff)?;
        rec.push(tape.scale(sq, 1.0 / rows.len() as f64)?);

        let mut slots = raw.clone();
        slots[m] = enhanced.z_tilde[m];
        let out = fuse_predict(tape, bind, fusion, &slots, &shared, presence)?;
        let out = out.select(tape, rows)?;
        let t = targets.select(rows);
        task.push(loss_task(tape, &out, t.as_targets())?);
    }
    let l_rec = mean_of(tape, &rec)?;
    let l_task_enh = mean_of(tape, &task)?;
    let scaled = tape.scale(l_task_enh, gamma)?;
    let l_cce = tape.add(l_rec, scaled)?;
    Ok(CceTerms {
        l_rec,
        l_task_enh,
        l_cce,
    })
}
