//! The assembled network and its forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cce::{enhance, loss_cce, CceConfig, CceLossParts, CceNetworks, Enhanced};
use crate::emc::{energy_flow, EnergyCoefficients, EnergyComponents, EnergyTerms};
use crate::error::{Error, Result};
use crate::fusion::{fuse_predict, loss_task, total_loss_var, FusionNetworks, FusionOutput, ObjectiveWeights, Targets, TotalLossParts};
use crate::imtd::{loss_imtd, teacher_statistics, trust_weights, DistillConfig, TrustWeights};
use crate::msd::{msd_terms, DisentangledRep, MsdConfig, MsdLossParts, MsdNetworks};
use crate::nn::{Binding, ParamStore};
use crate::presence::Presence;
use crate::rng::rng_for;
use crate::synth::{MultimodalBatch, TaskMode};

/// Widths shared by all modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Hidden width of every two-layer perceptron except the fusion head.
    pub hidden: usize,
    /// Encoder output h.
    pub rep: usize,
    /// Shared component h_c.
    pub shared: usize,
    /// Specific component h_s.
    pub specific: usize,
    pub fusion_hidden: usize,
    pub noise_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 16,
            rep: 12,
            shared: 8,
            specific: 8,
            fusion_hidden: 16,
            noise_dim: 4,
        }
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub mode: TaskMode,
    pub dims: ModelDims,
}

impl ModelSpec {
    pub fn for_batch(batch: &MultimodalBatch, num_classes: usize, mode: TaskMode, dims: ModelDims) -> Self {
        ModelSpec {
            modalities: batch.modalities.clone(),
            input_dims: batch.features.iter().map(|f| f.cols()).collect(),
            num_classes,
            mode,
            dims,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbmcModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub msd: MsdNetworks,
    pub cce: CceNetworks,
    pub fusion: FusionNetworks,
}

/// Which parameter groups a stage may update.
pub fn is_teacher(name: &str) -> bool {
    name.starts_with("teacher.")
}

pub fn is_fusion(name: &str) -> bool {
    name.starts_with("fusion.")
}

impl EbmcModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.modalities.len() < 2 || spec.modalities.len() != spec.input_dims.len() {
            return Err(Error::contract("a model needs at least two modalities with known dims"));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init");
        let msd = MsdNetworks::new(&mut store, &mut rng, &spec.modalities, &spec.input_dims, &spec.dims, spec.num_classes);
        let cce = CceNetworks::new(&mut store, &mut rng, &spec.modalities, &spec.dims);
        let fusion = FusionNetworks::new(
            &mut store,
            &mut rng,
            spec.modalities.len(),
            spec.dims.rep + spec.dims.shared,
            spec.dims.fusion_hidden,
            spec.num_classes,
            spec.mode,
        );
        Ok(EbmcModel {
            spec,
            store,
            msd,
            cce,
            fusion,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.modalities.len()
    }

    pub fn check_batch(&self, batch: &MultimodalBatch) -> Result<()> {
        if batch.modalities != self.spec.modalities {
            return Err(Error::contract(format!(
                "batch modalities {:?} differ from model modalities {:?}",
                batch.modalities, self.spec.modalities
            )));
        }
        for (f, &d) in batch.features.iter().zip(&self.spec.input_dims) {
            if f.cols() != d {
                return Err(Error::Dimension {
                    op: "model input",
                    left: f.shape(),
                    right: (f.rows(), d),
                });
            }
        }
        if let Some(&y) = batch.classes.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::contract(format!("class {y} out of range for {} classes", self.spec.num_classes)));
        }
        if self.spec.mode == TaskMode::Regression && batch.scores.is_none() {
            return Err(Error::contract("regression model needs score targets"));
        }
        Ok(())
    }

    /// Forward pass: encode, optional energy-descent refinement, decompose,
    /// optional enhancement, fuse.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        features: &[Var],
        presence: &Presence,
        labels: Option<&[usize]>,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        let mut z = Vec::with_capacity(features.len());
        for (m, &x) in features.iter().enumerate() {
            z.push(self.msd.encode(tape, bind, m, x, presence)?);
        }
        let energy = match &opts.flow {
            Some(coeffs) => {
                let terms = energy_flow(tape, bind, &self.msd, &z, presence, labels, coeffs)?;
                z = terms.refined.clone();
                Some(terms)
            }
            None => None,
        };
        let mut reps = Vec::with_capacity(z.len());
        let mut teacher_logits = Vec::with_capacity(z.len());
        for (m, &zm) in z.iter().enumerate() {
            let (z_c, z_s) = self.msd.decompose(tape, bind, m, zm, presence)?;
            teacher_logits.push(self.msd.teacher_logits(tape, bind, m, z_s)?);
            reps.push(DisentangledRep { z: zm, z_c, z_s });
        }
        let enhanced = if opts.enhance {
            enhance(tape, bind, &self.cce, &reps, presence, opts.cce_noise, opts.seed)?
        } else {
            Enhanced {
                z_tilde: z.clone(),
                rows: vec![Vec::new(); z.len()],
            }
        };
        let shared: Vec<Var> = reps.iter().map(|r| r.z_c).collect();
        let fused = fuse_predict(tape, bind, &self.fusion, &enhanced.z_tilde, &shared, presence)?;
        Ok(ForwardPass {
            reps,
            teacher_logits,
            enhanced,
            fused,
            energy,
        })
    }

    /// Builds the training objective for one batch on `tape`.
    pub fn step_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &MultimodalBatch,
        settings: &LossSettings,
        seed: u64,
    ) -> Result<StepOutput> {
        let presence = Presence::from_batch(batch);
        let features: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
        let labels = batch.classes.as_slice();
        let targets = match self.spec.mode {
            TaskMode::Classification => Targets::Classes(labels),
            TaskMode::Regression => Targets::Scores(
                batch
                    .scores
                    .as_deref()
                    .ok_or_else(|| Error::contract("regression model needs score targets"))?,
            ),
        };
        let opts = ForwardOptions {
            flow: settings.energy.then_some(settings.emc),
            enhance: settings.enhance,
            cce_noise: settings.cce.noise_scale,
            seed,
        };
        let pass = self.forward(tape, bind, &features, &presence, Some(labels), &opts)?;
        let w = &settings.weights;

        let l_task = if settings.task {
            Some(loss_task(tape, &pass.fused, targets)?)
        } else {
            None
        };
        let msd = if w.zeta > 0.0 {
            Some(msd_terms(tape, &pass.reps, &pass.teacher_logits, &presence, labels, &settings.msd)?)
        } else {
            None
        };
        let cce = if w.beta > 0.0 && settings.enhance {
            Some(loss_cce(tape, bind, &pass.enhanced, &pass.reps, &self.fusion, &presence, targets, settings.cce.gamma)?)
        } else {
            None
        };
        let emc = match (&pass.energy, w.gamma > 0.0) {
            (Some(terms), true) => Some(terms.loss(tape, settings.emc.delta_e)?),
            _ => None,
        };
        let (imtd, trust) = if w.eta > 0.0 {
            let mut sigmas = Vec::with_capacity(self.num_modalities());
            let mut l1 = Vec::with_capacity(self.num_modalities());
            let mut teachers = Vec::with_capacity(self.num_modalities());
            for m in 0..self.num_modalities() {
                let zs = tape.value(pass.reps[m].z_s).detach();
                let stats = teacher_statistics(
                    &self.store,
                    &self.msd.teachers[m],
                    &zs,
                    &settings.imtd,
                    crate::rng::derive_seed(seed, &format!("imtd/{m}")),
                )?;
                l1.push(stats.variance_l1());
                sigmas.push(stats.sigma);
                teachers.push(tape.value(pass.teacher_logits[m]).detach());
            }
            let trust = trust_weights(&sigmas, &l1, &presence)?;
            let l = loss_imtd(tape, &trust, pass.fused.logits, &teachers, settings.imtd.tau_kd)?;
            (Some(l), Some(trust))
        } else {
            (None, None)
        };

        let loss = total_loss_var(tape, w, [l_task, msd.as_ref().map(|t| t.l_msd), cce.as_ref().map(|t| t.l_cce), emc, imtd])?;
        let item = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
        let parts = TotalLossParts::weighted(
            w,
            item(l_task),
            item(msd.as_ref().map(|t| t.l_msd)),
            item(cce.as_ref().map(|t| t.l_cce)),
            item(emc),
            item(imtd),
        );
        let msd_parts = match &msd {
            Some(t) => t.parts(tape, &settings.msd)?,
            None => MsdLossParts::default(),
        };
        let cce_parts = cce.as_ref().map(|t| t.parts(tape, settings.cce.gamma)).unwrap_or_default();
        let energy = pass.energy.as_ref().map(|e| EnergySnapshot {
            modalities: e.modalities.clone(),
            components: e.components.clone(),
            grad_norm_sq: e.grad_norms(tape),
        });
        Ok(StepOutput {
            loss,
            parts,
            msd: msd_parts,
            cce: cce_parts,
            energy,
            trust,
            presence,
        })
    }

    /// Detached predictions in chunks of `chunk` rows. Evaluation uses no
    /// enhancement noise and a label-free energy flow.
    pub fn predict(&self, batch: &MultimodalBatch, flow: Option<EnergyCoefficients>, enhance: bool) -> Result<Predictions> {
        self.check_batch(batch)?;
        const CHUNK: usize = 512;
        let n = batch.len();
        let k = self.spec.num_classes;
        let mut logits = Vec::with_capacity(n * k);
        let mut scores = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let part = batch.select(&rows);
            let presence = Presence::from_batch(&part);
            let mut tape = Tape::new();
            let bind = self.store.bind(&mut tape, |_| false);
            let features: Vec<Var> = part.features.iter().map(|f| tape.constant(f.clone())).collect();
            let opts = ForwardOptions {
                flow,
                enhance,
                cce_noise: 0.0,
                seed: 0,
            };
            let pass = self.forward(&mut tape, &bind, &features, &presence, None, &opts)?;
            logits.extend_from_slice(tape.value(pass.fused.logits).data());
            if let Some(s) = pass.fused.score {
                scores.extend_from_slice(tape.value(s).data());
            }
            start = end;
        }
        Ok(Predictions {
            logits: Tensor::new(n, k, logits)?,
            scores: (self.spec.mode == TaskMode::Regression).then_some(scores),
        })
    }

    /// Detached per-modality representations for analysis.
    pub fn representations(&self, batch: &MultimodalBatch, flow: Option<EnergyCoefficients>) -> Result<Vec<RepValues>> {
        self.check_batch(batch)?;
        let presence = Presence::from_batch(batch);
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, |_| false);
        let features: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
        let opts = ForwardOptions {
            flow,
            enhance: true,
            cce_noise: 0.0,
            seed: 0,
        };
        let pass = self.forward(&mut tape, &bind, &features, &presence, None, &opts)?;
        Ok((0..self.num_modalities())
            .map(|m| RepValues {
                z: tape.value(pass.reps[m].z).detach(),
                z_c: tape.value(pass.reps[m].z_c).detach(),
                z_s: tape.value(pass.reps[m].z_s).detach(),
                z_tilde: tape.value(pass.enhanced.z_tilde[m]).detach(),
                teacher_logits: tape.value(pass.teacher_logits[m]).detach(),
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub flow: Option<EnergyCoefficients>,
    pub enhance: bool,
    pub cce_noise: f64,
    pub seed: u64,
}

pub struct ForwardPass {
    /// Representations after any refinement.
    pub reps: Vec<DisentangledRep>,
    pub teacher_logits: Vec<Var>,
    pub enhanced: Enhanced,
    pub fused: FusionOutput,
    pub energy: Option<EnergyTerms>,
}

/// What a training step computes and how each term is weighted.
#[derive(Clone, Debug)]
pub struct LossSettings {
    pub weights: ObjectiveWeights,
    /// Include the task loss.
    pub task: bool,
    /// Compute energies and apply the energy-descent refinement.
    pub energy: bool,
    pub enhance: bool,
    pub msd: MsdConfig,
    pub cce: CceConfig,
    pub emc: EnergyCoefficients,
    pub imtd: DistillConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySnapshot {
    pub modalities: Vec<usize>,
    pub components: Vec<EnergyComponents>,
    pub grad_norm_sq: Vec<f64>,
}

pub struct StepOutput {
    pub loss: Var,
    pub parts: TotalLossParts,
    pub msd: MsdLossParts,
    pub cce: CceLossParts,
    pub energy: Option<EnergySnapshot>,
    pub trust: Option<TrustWeights>,
    pub presence: Presence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub logits: Tensor,
    pub scores: Option<Vec<f64>>,
}

impl Predictions {
    pub fn classes(&self) -> Vec<usize> {
        (0..self.logits.rows()).map(|i| crate::synth::argmax(self.logits.row(i))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepValues {
    pub z: Tensor,
    pub z_c: Tensor,
    pub z_s: Tensor,
    pub z_tilde: Tensor,
    pub teacher_logits: Tensor,
}
