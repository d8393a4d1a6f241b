//! Fusion head, task loss, and the weighted total objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::msd::mask_rows;
use crate::nn::{Binding, Mlp, ParamStore};
use crate::presence::Presence;
use crate::synth::TaskMode;

/// Masked concat of per-modality slots, then a tanh perceptron.
///
/// Slot m holds `[r_m, z_c_m]` where `r_m` is the (enhanced) representation
/// and `z_c_m` the shared component; slots follow modality order. In
/// regression mode the head emits K class logits followed by one score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNetworks {
    pub mlp: Mlp,
    pub mode: TaskMode,
    pub num_classes: usize,
    pub slot_width: usize,
}

impl FusionNetworks {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        modalities: usize,
        slot_width: usize,
        hidden: usize,
        num_classes: usize,
        mode: TaskMode,
    ) -> Self {
        let out = match mode {
            TaskMode::Classification => num_classes,
            TaskMode::Regression => num_classes + 1,
        };
        FusionNetworks {
            mlp: Mlp::new(store, rng, "fusion", modalities * slot_width, hidden, out),
            mode,
            num_classes,
            slot_width,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Penultimate (tanh) activation.
    pub z_fusion: Var,
    /// n×K class logits.
    pub logits: Var,
    /// n×1 predicted score, regression mode only.
    pub score: Option<Var>,
}

impl FusionOutput {
    pub fn select(&self, tape: &mut Tape, rows: &[usize]) -> Result<FusionOutput> {
        Ok(FusionOutput {
            z_fusion: tape.gather_rows(self.z_fusion, rows)?,
            logits: tape.gather_rows(self.logits, rows)?,
            score: self.score.map(|s| tape.gather_rows(s, rows)).transpose()?,
        })
    }
}

pub fn fuse_predict(
    tape: &mut Tape,
    bind: &Binding,
    nets: &FusionNetworks,
    reps: &[Var],
    shared: &[Var],
    presence: &Presence,
) -> Result<FusionOutput> {
    if reps.len() != shared.len() || reps.len() * nets.slot_width != nets.mlp.input_dim() {
        return Err(Error::contract(format!(
            "fusion head expects {} inputs, got {} modalities",
            nets.mlp.input_dim(),
            reps.len()
        )));
    }
    let mut slots = Vec::with_capacity(reps.len());
    for (m, (&r, &c)) in reps.iter().zip(shared).enumerate() {
        let slot = tape.concat_cols(&[r, c])?;
        if tape.shape(slot).1 != nets.slot_width {
            return Err(Error::Dimension {
                op: "fuse_predict",
                left: tape.shape(slot),
                right: (tape.shape(slot).0, nets.slot_width),
            });
        }
        slots.push(mask_rows(tape, slot, presence, m)?);
    }
    let input = tape.concat_cols(&slots)?;
    let (z_fusion, out) = nets.mlp.forward_with_hidden(tape, bind, input)?;
    let (logits, score) = match nets.mode {
        TaskMode::Classification => (out, None),
        TaskMode::Regression => (
            tape.slice_cols(out, 0, nets.num_classes)?,
            Some(tape.slice_cols(out, nets.num_classes, 1)?),
        ),
    };
    Ok(FusionOutput {
        z_fusion,
        logits,
        score,
    })
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Scores(&'a [f64]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Scores(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> OwnedTargets {
        match self {
            Targets::Classes(c) => OwnedTargets::Classes(rows.iter().map(|&i| c[i]).collect()),
            Targets::Scores(s) => OwnedTargets::Scores(rows.iter().map(|&i| s[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OwnedTargets {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

impl OwnedTargets {
    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Classes(c) => Targets::Classes(c),
            OwnedTargets::Scores(s) => Targets::Scores(s),
        }
    }
}

/// Mean cross-entropy for class targets, mean absolute error for scores.
pub fn loss_task(tape: &mut Tape, out: &FusionOutput, targets: Targets<'_>) -> Result<Var> {
    match targets {
        Targets::Classes(y) => tape.cross_entropy(out.logits, y),
        Targets::Scores(s) => {
            let score = out
                .score
                .ok_or_else(|| Error::contract("score targets need a regression head"))?;
            let t = crate::autodiff::Tensor::new(s.len(), 1, s.to_vec())?;
            let t = tape.constant(t);
            let d = tape.sub(score, t)?;
            let d = tape.abs(d)?;
            tape.mean(d)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub zeta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            zeta: 0.5,
            beta: 0.1,
            gamma: 0.1,
            eta: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.zeta, self.beta, self.gamma, self.eta];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::contract(format!("objective weights must be non-negative, got {all:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TotalLossParts {
    pub l_task: f64,
    pub l_msd: f64,
    pub l_cce: f64,
    pub l_emc: f64,
    pub l_imtd: f64,
    pub l_total: f64,
}

impl TotalLossParts {
    /// Weighted sum, evaluated in the same order as on the tape.
    pub fn weighted(w: &ObjectiveWeights, l_task: f64, l_msd: f64, l_cce: f64, l_emc: f64, l_imtd: f64) -> Self {
        let l_total = l_task + w.zeta * l_msd + w.beta * l_cce + w.gamma * l_emc + w.eta * l_imtd;
        TotalLossParts {
            l_task,
            l_msd,
            l_cce,
            l_emc,
            l_imtd,
            l_total,
        }
    }
}

pub fn total_loss(weights: &ObjectiveWeights, parts: [f64; 5]) -> Result<TotalLossParts> {
    weights.validate()?;
    let [a, b, c, d, e] = parts;
    Ok(TotalLossParts::weighted(weights, a, b, c, d, e))
}

/// Tape counterpart of [`total_loss`]. `None` terms enter as zero.
pub fn total_loss_var(tape: &mut Tape, weights: &ObjectiveWeights, terms: [Option<Var>; 5]) -> Result<Var> {
    weights.validate()?;
    let ws = [1.0, weights.zeta, weights.beta, weights.gamma, weights.eta];
    let mut total = match terms[0] {
        Some(t) => t,
        None => tape.constant(crate::autodiff::Tensor::scalar(0.0)),
    };
    for (t, w) in terms[1..].iter().zip(&ws[1..]) {
        if let Some(t) = *t {
            let s = tape.scale(t, *w)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::{gaussian_tensor, rng_for};

    #[test]
    fn total_loss_fixtures() {
        let w = ObjectiveWeights::default();
        assert_eq!((w.zeta, w.beta, w.gamma, w.eta), (0.5, 0.1, 0.1, 0.1));
        let p = total_loss(&w, [1.0; 5]).unwrap();
        assert!((p.l_total - 1.8).abs() < 1e-9);
        let zero = ObjectiveWeights {
            zeta: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eta: 0.0,
        };
        assert_eq!(total_loss(&zero, [0.7, 1.0, 2.0, 3.0, 4.0]).unwrap().l_total, 0.7);
        let neg = ObjectiveWeights { eta: -1.0, ..w };
        assert!(total_loss(&neg, [1.0; 5]).is_err());
    }

    #[test]
    fn tape_total_matches_parts_exactly() {
        let w = ObjectiveWeights::default();
        let vals = [0.3, 1.7, 0.21, 5.5, 0.013];
        let mut tape = Tape::new();
        let vars = vals.map(|v| Some(tape.constant(Tensor::scalar(v))));
        let t = total_loss_var(&mut tape, &w, vars).unwrap();
        assert_eq!(tape.item(t), total_loss(&w, vals).unwrap().l_total);
    }

    fn head(mode: TaskMode) -> (ParamStore, FusionNetworks) {
        let mut store = ParamStore::new();
        let nets = FusionNetworks::new(&mut store, &mut rng_for(5, "init"), 3, 4, 6, 7, mode);
        (store, nets)
    }

    #[test]
    fn fuse_predict_shapes_and_row_independence() {
        let (store, nets) = head(TaskMode::Classification);
        let mut rng = rng_for(1, "x");
        let xs: Vec<Tensor> = (0..6).map(|_| gaussian_tensor(&mut rng, 5, 2, 1.0)).collect();
        let mut flags = vec![true; 15];
        flags[0] = false;
        flags[1] = false;
        let presence = Presence::new(5, 3, flags).unwrap();
        let run = |xs: &[Tensor], presence: &Presence| {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape, |_| false);
            let v: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = fuse_predict(&mut tape, &bind, &nets, &v[..3], &v[3..], presence).unwrap();
            tape.value(out.logits).detach()
        };
        let logits = run(&xs, &presence);
        assert_eq!(logits.shape(), (5, 7));
        assert!(logits.all_finite());

        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Tensor> = xs.iter().map(|t| t.select_rows(&perm)).collect();
        let pflags: Vec<bool> = perm.iter().flat_map(|&i| presence.flags()[i * 3..i * 3 + 3].to_vec()).collect();
        let pp = Presence::new(5, 3, pflags).unwrap();
        assert_eq!(run(&permuted, &pp), logits.select_rows(&perm));
    }

    #[test]
    fn task_loss_fixtures() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(3, 7));
        let out = FusionOutput {
            z_fusion: logits,
            logits,
            score: None,
        };
        let l = loss_task(&mut tape, &out, Targets::Classes(&[0, 3, 6])).unwrap();
        assert!((tape.item(l) - 7f64.ln()).abs() < 1e-12);

        let mut rng = rng_for(2, "ce");
        let raw = gaussian_tensor(&mut rng, 6, 4, 2.0);
        let labels = [3, 1, 0, 2, 2, 1];
        let lv = tape.constant(raw.clone());
        let out = FusionOutput {
            z_fusion: lv,
            logits: lv,
            score: None,
        };
        let l = loss_task(&mut tape, &out, Targets::Classes(&labels)).unwrap();
        let sm = tape.softmax_rows(lv, 1.0).unwrap();
        let p = tape.value(sm);
        let direct = -labels.iter().enumerate().map(|(i, &y)| p.get(i, y).ln()).sum::<f64>() / 6.0;
        assert!((tape.item(l) - direct).abs() < 1e-12);

        let s = tape.constant(Tensor::new(3, 1, vec![0.5, -2.0, 3.0]).unwrap());
        let out = FusionOutput {
            z_fusion: s,
            logits: s,
            score: Some(s),
        };
        let l = loss_task(&mut tape, &out, Targets::Scores(&[0.5, -2.0, 3.0])).unwrap();
        assert_eq!(tape.item(l), 0.0);
        let l = loss_task(&mut tape, &out, Targets::Scores(&[1.5, -2.0, 1.0])).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_head_splits_logits_and_score() {
        let (store, nets) = head(TaskMode::Regression);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::filled(2, 2, 0.5));
        let out = fuse_predict(&mut tape, &bind, &nets, &[x, x, x], &[x, x, x], &Presence::all(2, 3)).unwrap();
        assert_eq!(tape.shape(out.logits), (2, 7));
        assert_eq!(tape.shape(out.score.unwrap()), (2, 1));
    }
}
