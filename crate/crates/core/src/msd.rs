//! Shared/specific decomposition, its three losses, and the unimodal teachers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::nn::{Binding, Mlp, ParamStore};
use crate::presence::Presence;

/// Added to every norm when cosines are taken inside a training loss.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        MsdConfig {
            tau: 0.1,
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

/// Per-modality encoder, shared and specific projections, and teacher head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdNetworks {
    pub encoders: Vec<Mlp>,
    pub shared: Vec<Mlp>,
    pub specific: Vec<Mlp>,
    pub teachers: Vec<Mlp>,
}

impl MsdNetworks {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        modalities: &[String],
        input_dims: &[usize],
        dims: &ModelDims,
        num_classes: usize,
    ) -> Self {
        let mut nets = MsdNetworks {
            encoders: Vec::new(),
            shared: Vec::new(),
            specific: Vec::new(),
            teachers: Vec::new(),
        };
        for (name, &d) in modalities.iter().zip(input_dims) {
            let h = dims.hidden;
            nets.encoders.push(Mlp::new(store, rng, &format!("encoder.{name}"), d, h, dims.rep));
            nets.shared.push(Mlp::new(store, rng, &format!("shared.{name}"), dims.rep, h, dims.shared));
            nets.specific.push(Mlp::new(store, rng, &format!("specific.{name}"), dims.rep, h, dims.specific));
            nets.teachers.push(Mlp::new(store, rng, &format!("teacher.{name}"), dims.specific, h, num_classes));
        }
        nets
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Encoder output with absent rows zeroed.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, m: usize, x: Var, presence: &Presence) -> Result<Var> {
        let (_, d) = tape.shape(x);
        if d != self.encoders[m].input_dim() {
            return Err(Error::contract(format!(
                "modality {m} has {d} features but its encoder expects {}",
                self.encoders[m].input_dim()
            )));
        }
        let z = self.encoders[m].forward(tape, bind, x)?;
        mask_rows(tape, z, presence, m)
    }

    /// (z_c, z_s) for one modality, absent rows zeroed.
    pub fn decompose(&self, tape: &mut Tape, bind: &Binding, m: usize, z: Var, presence: &Presence) -> Result<(Var, Var)> {
        let zc = self.shared[m].forward(tape, bind, z)?;
        let zs = self.specific[m].forward(tape, bind, z)?;
        Ok((mask_rows(tape, zc, presence, m)?, mask_rows(tape, zs, presence, m)?))
    }

    pub fn teacher_logits(&self, tape: &mut Tape, bind: &Binding, m: usize, zs: Var) -> Result<Var> {
        self.teachers[m].forward(tape, bind, zs)
    }
}

pub(crate) fn mask_rows(tape: &mut Tape, x: Var, presence: &Presence, m: usize) -> Result<Var> {
    if (0..presence.rows()).all(|i| presence.is_present(i, m)) {
        return Ok(x);
    }
    let (_, w) = tape.shape(x);
    let mask = tape.constant(presence.indicator(m, w));
    tape.mul(x, mask)
}

/// Raw, shared and specific representation of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisentangledRep {
    pub z: Var,
    pub z_c: Var,
    pub z_s: Var,
}

/// Encodes and decomposes every modality of a batch of feature matrices.
pub fn disentangle(
    tape: &mut Tape,
    bind: &Binding,
    nets: &MsdNetworks,
    features: &[Var],
    presence: &Presence,
) -> Result<Vec<DisentangledRep>> {
    if features.len() != nets.num_modalities() {
        return Err(Error::contract(format!(
            "batch has {} modalities, networks have {}",
            features.len(),
            nets.num_modalities()
        )));
    }
    let mut reps = Vec::with_capacity(features.len());
    for (m, &x) in features.iter().enumerate() {
        let z = nets.encode(tape, bind, m, x, presence)?;
        let (z_c, z_s) = nets.decompose(tape, bind, m, z, presence)?;
        reps.push(DisentangledRep { z, z_c, z_s });
    }
    Ok(reps)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Invariant-alignment InfoNCE over shared components.
///
/// Anchors are the (sample i, modality m) pairs with m present and at least
/// two modalities present in sample i. The positive is the mean of sample
/// i's present shared components. The denominator holds the positive term
/// plus every present shared component, of any modality, belonging to a
/// different sample. With all components identical this gives
/// ln(1 + (n − 1)·|present modalities|), and 0 for a one-sample batch.
pub fn loss_inv(tape: &mut Tape, shared: &[Var], presence: &Presence, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("InfoNCE temperature must be positive, got {tau}")));
    }
    let n = presence.rows();
    let m = shared.len();
    let anchors: Vec<usize> = (0..m)
        .flat_map(|k| (0..n).map(move |i| (k, i)))
        .filter(|&(k, i)| presence.is_present(i, k) && presence.count(i) >= 2)
        .map(|(k, i)| k * n + i)
        .collect();
    if anchors.is_empty() {
        return Ok(zero(tape));
    }

    let (_, w) = tape.shape(shared[0]);
    let mut agg: Option<Var> = None;
    for (k, &s) in shared.iter().enumerate() {
        let weight = presence.row_tensor(w, |i| {
            if presence.is_present(i, k) {
                1.0 / presence.count(i) as f64
            } else {
                0.0
            }
        });
        let weight = tape.constant(weight);
        let part = tape.mul(s, weight)?;
        agg = Some(match agg {
            None => part,
            Some(a) => tape.add(a, part)?,
        });
    }
    let centre = tape.row_normalize(agg.expect("at least one modality"), COSINE_EPS)?;

    let units = shared
        .iter()
        .map(|&s| tape.row_normalize(s, COSINE_EPS))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&units)?;
    let centres = tape.concat_rows(&vec![centre; m])?;
    let pos = tape.mul(stacked, centres)?;
    let pos = tape.sum_rows(pos)?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let sim = tape.matmul_nt(stacked, stacked)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let logits = tape.concat_cols(&[pos, sim])?;

    let width = 1 + m * n;
    let mut mask = vec![false; m * n * width];
    for r in 0..m * n {
        let i = r % n;
        let row = &mut mask[r * width..(r + 1) * width];
        row[0] = true;
        for k2 in 0..m {
            for j in (0..n).filter(|&j| j != i && presence.is_present(j, k2)) {
                row[1 + k2 * n + j] = true;
            }
        }
    }
    let lse = tape.logsumexp_rows(logits, Some(&mask))?;
    let per_anchor = tape.sub(lse, pos)?;
    let picked = tape.gather_rows(per_anchor, &anchors)?;
    tape.mean(picked)
}

/// Sum over unordered modality pairs of the mean cosine between specific
/// components, over samples where both modalities are present.
pub fn loss_dis(tape: &mut Tape, specific: &[Var], presence: &Presence) -> Result<Var> {
    let mut total: Option<Var> = None;
    for a in 0..specific.len() {
        for b in a + 1..specific.len() {
            let rows: Vec<usize> = (0..presence.rows())
                .filter(|&i| presence.is_present(i, a) && presence.is_present(i, b))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let sa = tape.gather_rows(specific[a], &rows)?;
            let sb = tape.gather_rows(specific[b], &rows)?;
            let cos = tape.row_cosine_eps(sa, sb, COSINE_EPS)?;
            let mean = tape.mean(cos)?;
            total = Some(match total {
                None => mean,
                Some(t) => tape.add(t, mean)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

/// Mean over modalities of the teachers' cross-entropy on present rows.
pub fn loss_uni(tape: &mut Tape, teacher_logits: &[Var], presence: &Presence, labels: &[usize]) -> Result<Var> {
    let mut terms = Vec::new();
    for (m, &logits) in teacher_logits.iter().enumerate() {
        let rows = presence.rows_of(m);
        if rows.is_empty() {
            continue;
        }
        let picked = tape.gather_rows(logits, &rows)?;
        let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        terms.push(tape.cross_entropy(picked, &y)?);
    }
    if terms.is_empty() {
        return Ok(zero(tape));
    }
    let count = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / count)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MsdLossParts {
    pub l_inv: f64,
    pub l_dis: f64,
    pub l_uni: f64,
    pub l_msd: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn loss_msd(l_inv: f64, l_dis: f64, l_uni: f64, lambda1: f64, lambda2: f64) -> Result<MsdLossParts> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::contract(format!(
            "MSD weights must be non-negative, got {lambda1} and {lambda2}"
        )));
    }
    Ok(MsdLossParts {
        l_inv,
        l_dis,
        l_uni,
        l_msd: l_inv + lambda1 * l_dis + lambda2 * l_uni,
        lambda1,
        lambda2,
    })
}

/// The three MSD terms on the tape together with their weighted sum.
pub struct MsdTerms {
    pub l_inv: Var,
    pub l_dis: Var,
    pub l_uni: Var,
    pub l_msd: Var,
}

impl MsdTerms {
    pub fn parts(&self, tape: &Tape, cfg: &MsdConfig) -> Result<MsdLossParts> {
        loss_msd(
            tape.item(self.l_inv),
            tape.item(self.l_dis),
            tape.item(self.l_uni),
            cfg.lambda1,
            cfg.lambda2,
        )
    }
}

/// Builds L_inv, L_dis and L_uni for the given representations.
pub fn msd_terms(
    tape: &mut Tape,
    reps: &[DisentangledRep],
    teacher_logits: &[Var],
    presence: &Presence,
    labels: &[usize],
    cfg: &MsdConfig,
) -> Result<MsdTerms> {
    loss_msd(0.0, 0.0, 0.0, cfg.lambda1, cfg.lambda2)?;
    let shared: Vec<Var> = reps.iter().map(|r| r.z_c).collect();
    let specific: Vec<Var> = reps.iter().map(|r| r.z_s).collect();
    let l_inv = loss_inv(tape, &shared, presence, cfg.tau)?;
    let l_dis = loss_dis(tape, &specific, presence)?;
    let l_uni = loss_uni(tape, teacher_logits, presence, labels)?;
    let a = tape.scale(l_dis, cfg.lambda1)?;
    let b = tape.scale(l_uni, cfg.lambda2)?;
    let s = tape.add(l_inv, a)?;
    let l_msd = tape.add(s, b)?;
    Ok(MsdTerms {
        l_inv,
        l_dis,
        l_uni,
        l_msd,
    })
}
