//! Two-stage training schedule, evaluation protocols and run artifacts.
//!
//! Stage I fits encoders, decomposition networks, teachers and the
//! enhancement generators on `L_MSD + β·L_CCE`. Stage II freezes the
//! teachers, turns on the energy-descent refinement and trains under the
//! full weighted objective.

pub mod checkpoint;
pub mod config;
mod dataset;
mod log;
mod protocols;
mod report;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::emc::{EnergyCoefficients, EnergyReport};
use crate::error::{Error, Result};
use crate::fusion::{ObjectiveWeights, TotalLossParts};
use crate::imtd::summarize;
use crate::metrics::MetricRecord;
use crate::model::{is_fusion, is_teacher, EbmcModel, LossSettings, ModelSpec};
use crate::nn::Sgd;
use crate::rng::{derive_seed, rng_for};
use crate::synth::{apply_random_modality_missing, MultimodalBatch};
use crate::Tape;

pub use config::TrainConfig;
pub use dataset::Dataset;
pub use log::{write_energy_csv, write_metrics_csv, write_runlog, write_trust_csv, AuxLosses, EpochLog, MetricRow, RunLog, TrustAudit};
pub use protocols::{condition_batch, dropout_rate, evaluate, run_ablation, run_robustness, AblationResult, Condition, Protocol, DROPOUT_RATES};
pub use report::{aggregate, read_metrics_csv, AggregateRow, Report};

/// Identifies a run in every file it writes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub config_hash: String,
}

impl RunHeader {
    pub fn new(run_id: impl Into<String>, cfg: &TrainConfig) -> Self {
        RunHeader {
            run_id: run_id.into(),
            config_hash: cfg.hash(),
        }
    }

    /// `run_id=<id>, config_hash=<hash>`, without the comment marker.
    pub fn line(&self) -> String {
        format!("run_id={}, config_hash={}", self.run_id, self.config_hash)
    }

    /// Parses a `# run_id=..., config_hash=...` line.
    pub fn parse_comment(line: &str) -> Option<Self> {
        let rest = line.strip_prefix('#')?.trim();
        let (a, b) = rest.split_once(", ")?;
        Some(RunHeader {
            run_id: a.strip_prefix("run_id=")?.to_string(),
            config_hash: b.strip_prefix("config_hash=")?.to_string(),
        })
    }
}

/// A component whose losses an ablation removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    Msd,
    Cce,
    Emc,
    Imtd,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Msd, Module::Cce, Module::Emc, Module::Imtd];

    pub fn name(self) -> &'static str {
        match self {
            Module::Msd => "msd",
            Module::Cce => "cce",
            Module::Emc => "emc",
            Module::Imtd => "imtd",
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}; expected one of msd, cce, emc, imtd")))
    }
}

/// Set of disabled modules. The empty set is the full model.
///
/// Disabling MSD zero-weights its three losses but keeps the decomposition
/// networks in the forward pass. Disabling CCE also skips the enhancement
/// (fusion sees the raw representations). Disabling EMC removes both the gap
/// loss and the energy-descent refinement.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ablation(pub BTreeSet<Module>);

impl Ablation {
    pub fn full() -> Self {
        Ablation::default()
    }

    pub fn without(modules: &[Module]) -> Self {
        Ablation(modules.iter().copied().collect())
    }

    pub fn enabled(&self, m: Module) -> bool {
        !self.0.contains(&m)
    }

    /// `full`, or e.g. `without-emc+imtd`.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            "full".into()
        } else {
            let names: Vec<&str> = self.0.iter().map(|m| m.name()).collect();
            format!("without-{}", names.join("+"))
        }
    }

    /// The Stage I schedule only depends on MSD and CCE.
    fn stage1_key(&self) -> (bool, bool) {
        (self.enabled(Module::Msd), self.enabled(Module::Cce))
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated module list; empty means the full model.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            set.insert(part.parse()?);
        }
        Ok(Ablation(set))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Configuration plus ablation: everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub cfg: TrainConfig,
    pub ablation: Ablation,
}

impl RunPlan {
    pub fn new(cfg: TrainConfig, ablation: Ablation) -> Self {
        RunPlan { cfg, ablation }
    }

    pub fn seed(&self) -> u64 {
        self.cfg.train.seed
    }

    /// Energy coefficients in force for Stage II and evaluation.
    pub fn energy(&self) -> EnergyCoefficients {
        let mut e = self.cfg.emc;
        if !self.ablation.enabled(Module::Emc) {
            e.lambda_flow = 0.0;
        }
        e
    }

    /// Refinement applied at evaluation time.
    pub fn eval_flow(&self) -> Option<EnergyCoefficients> {
        let e = self.energy();
        (e.lambda_flow > 0.0).then_some(e)
    }

    pub fn enhance(&self) -> bool {
        self.ablation.enabled(Module::Cce)
    }

    pub fn settings(&self, stage: Stage) -> LossSettings {
        let a = &self.ablation;
        let o = &self.cfg.objective;
        let on = |m: Module, w: f64| if a.enabled(m) { w } else { 0.0 };
        let weights = match stage {
            Stage::One => ObjectiveWeights {
                zeta: on(Module::Msd, 1.0),
                beta: on(Module::Cce, o.beta),
                gamma: 0.0,
                eta: 0.0,
            },
            Stage::Two => {
                let keep = self.cfg.train.keep_stage1_losses;
                ObjectiveWeights {
                    zeta: if keep { on(Module::Msd, o.zeta) } else { 0.0 },
                    beta: if keep { on(Module::Cce, o.beta) } else { 0.0 },
                    gamma: on(Module::Emc, o.gamma),
                    eta: on(Module::Imtd, o.eta),
                }
            }
        };
        LossSettings {
            weights,
            task: stage == Stage::Two,
            energy: stage == Stage::Two,
            enhance: self.enhance(),
            msd: self.cfg.msd.clone(),
            cce: self.cfg.cce.clone(),
            emc: self.energy(),
            imtd: self.cfg.imtd.clone(),
        }
    }

    /// Parameters a stage may update.
    pub fn trainable(&self, stage: Stage, name: &str) -> bool {
        match stage {
            Stage::One => true,
            Stage::Two => !is_teacher(name) && (!self.cfg.train.stage2_freeze_stage1 || is_fusion(name)),
        }
    }
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    parts: TotalLossParts,
    msd: [f64; 4],
    cce: [f64; 3],
    energy: Vec<([f64; 4], f64, usize)>,
    trust: Vec<[f64; 4]>,
    trust_count: Vec<usize>,
    audit: TrustAudit,
}

impl EpochAccumulator {
    fn new(modalities: usize) -> Self {
        EpochAccumulator {
            energy: vec![([0.0; 4], 0.0, 0); modalities],
            trust: vec![[0.0; 4]; modalities],
            trust_count: vec![0; modalities],
            ..Default::default()
        }
    }
}

fn check_data(model: &EbmcModel, data: &MultimodalBatch, batch_size: usize) -> Result<()> {
    model.check_batch(data)?;
    data.check_invariants()?;
    if data.len() < batch_size.min(2) {
        return Err(Error::contract("training data needs at least two samples"));
    }
    Ok(())
}

/// Runs one stage for its configured number of epochs, appending to `log`.
pub fn train_stage(
    model: &mut EbmcModel,
    plan: &RunPlan,
    stage: Stage,
    data: &MultimodalBatch,
    test: Option<&MultimodalBatch>,
    log: &mut RunLog,
) -> Result<()> {
    let t = &plan.cfg.train;
    check_data(model, data, t.batch_size)?;
    let settings = plan.settings(stage);
    let epochs = match stage {
        Stage::One => t.stage1_epochs,
        Stage::Two => t.stage2_epochs,
    };
    let seed = plan.seed();
    let names = model.spec.modalities.clone();
    let mut sgd = Sgd::new(t.learning_rate, t.momentum);
    let stage_no = stage.number();

    for local in 1..=epochs {
        let epoch = log.epochs.last().map_or(1, |e| e.epoch + 1);
        let started = Instant::now();
        let epoch_data;
        let source = if t.missing_rate > 0.0 {
            let s = derive_seed(seed, &format!("missing/{stage_no}/{local}"));
            epoch_data = apply_random_modality_missing(data, t.missing_rate, s)?;
            &epoch_data
        } else {
            data
        };
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng_for(seed, &format!("shuffle/{stage_no}/{local}")));
        let mut acc = EpochAccumulator::new(names.len());

        for (b, rows) in order.chunks(t.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let batch = source.select(rows);
            let batch_seed = derive_seed(seed, &format!("step/{stage_no}/{local}/{b}"));
            let mut tape = Tape::new();
            let bind = model.store.bind(&mut tape, |n| plan.trainable(stage, n));
            let out = model.step_loss(&mut tape, &bind, &batch, &settings, batch_seed)?;
            if !out.parts.l_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: stage_no,
                    epoch,
                    batch: b,
                    batch_seed,
                    energies: out
                        .energy
                        .as_ref()
                        .map(|e| e.components.iter().map(|c| c.e_total).collect())
                        .unwrap_or_default(),
                });
            }
            if tape.requires_grad(out.loss) {
                tape.backward(out.loss)?;
                sgd.step(&mut model.store, &tape, &bind);
            }

            acc.batches += 1;
            let p = &out.parts;
            acc.parts.l_task += p.l_task;
            acc.parts.l_msd += p.l_msd;
            acc.parts.l_cce += p.l_cce;
            acc.parts.l_emc += p.l_emc;
            acc.parts.l_imtd += p.l_imtd;
            acc.parts.l_total += p.l_total;
            for (a, v) in acc.msd.iter_mut().zip([out.msd.l_inv, out.msd.l_dis, out.msd.l_uni, out.msd.l_msd]) {
                *a += v;
            }
            for (a, v) in acc.cce.iter_mut().zip([out.cce.l_rec, out.cce.l_task_enh, out.cce.l_cce]) {
                *a += v;
            }
            if let Some(e) = &out.energy {
                for ((&m, c), g) in e.modalities.iter().zip(&e.components).zip(&e.grad_norm_sq) {
                    let slot = &mut acc.energy[m];
                    for (s, v) in slot.0.iter_mut().zip([c.e_magnitude, c.e_loss, c.e_uncertainty, c.e_total]) {
                        *s += v;
                    }
                    slot.1 += g;
                    slot.2 += 1;
                }
            }
            if let Some(w) = &out.trust {
                acc.audit.absorb(w, &out.presence);
                for (m, s) in summarize(w, &out.presence, &names).into_iter().enumerate() {
                    let c = s.count as f64;
                    for (a, v) in acc.trust[m].iter_mut().zip([s.mean_sigma, s.mean_c, s.mean_rho, s.mean_alpha]) {
                        *a += c * v;
                    }
                    acc.trust_count[m] += s.count;
                }
            }
        }

        let eval = match test {
            Some(test) if stage == Stage::Two && (epoch % t.eval_every == 0 || local == epochs) => {
                Some(evaluate(model, plan, test)?)
            }
            _ => None,
        };
        log.push(EpochLog::finish(
            epoch,
            stage_no,
            &names,
            acc.batches,
            acc.parts,
            acc.msd,
            acc.cce,
            &acc.energy,
            &acc.trust,
            &acc.trust_count,
            acc.audit,
            eval,
            started.elapsed().as_secs_f64(),
        ))?;
    }
    Ok(())
}

/// A trained model with its log.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: EbmcModel,
    pub log: RunLog,
}

impl TrainedRun {
    /// Energy report of the first and last Stage II epochs.
    pub fn energy_span(&self) -> Option<(&EnergyReport, &EnergyReport)> {
        let mut it = self.log.epochs.iter().filter_map(|e| e.energy.as_ref());
        let first = it.next()?;
        Some((first, it.next_back().unwrap_or(first)))
    }
}

pub fn new_model(plan: &RunPlan, data: &Dataset) -> Result<EbmcModel> {
    let spec = ModelSpec::for_batch(&data.train, data.spec.num_classes, data.spec.mode, plan.cfg.model);
    EbmcModel::new(spec, plan.seed())
}

pub fn train_stage1(plan: &RunPlan, data: &Dataset) -> Result<TrainedRun> {
    plan.cfg.validate()?;
    let mut model = new_model(plan, data)?;
    let mut log = RunLog::default();
    train_stage(&mut model, plan, Stage::One, &data.train, Some(&data.test), &mut log)?;
    Ok(TrainedRun { model, log })
}

/// Continues a Stage I result with Stage II.
pub fn train_stage2(plan: &RunPlan, stage1: TrainedRun, data: &Dataset) -> Result<TrainedRun> {
    plan.cfg.validate()?;
    let TrainedRun { mut model, mut log } = stage1;
    train_stage(&mut model, plan, Stage::Two, &data.train, Some(&data.test), &mut log)?;
    Ok(TrainedRun { model, log })
}

/// Both stages from a fresh initialization.
pub fn train(plan: &RunPlan, data: &Dataset) -> Result<TrainedRun> {
    let s1 = train_stage1(plan, data)?;
    train_stage2(plan, s1, data)
}

/// Final test-set metrics of a run.
pub fn final_metrics(run: &TrainedRun, plan: &RunPlan, data: &Dataset) -> Result<MetricRecord> {
    evaluate(&run.model, plan, &data.test)
}

#[cfg(test)]
mod tests;
