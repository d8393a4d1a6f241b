//! Evaluation, ablation sweeps and robustness protocols.

use std::collections::HashMap;
use std::str::FromStr;

use super::{train_stage1, train_stage2, Ablation, Dataset, RunPlan, TrainConfig, TrainedRun};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, regression_metrics, MetricRecord};
use crate::model::EbmcModel;
use crate::rng::derive_seed;
use crate::synth::{apply_feature_dropout, apply_modality_missing, nonempty_subsets, subset_key, MultimodalBatch, TaskMode};

/// Test-set metrics with the plan's evaluation-time refinement and enhancement.
pub fn evaluate(model: &EbmcModel, plan: &RunPlan, batch: &MultimodalBatch) -> Result<MetricRecord> {
    let preds = model.predict(batch, plan.eval_flow(), plan.enhance())?;
    match model.spec.mode {
        TaskMode::Classification => Ok(MetricRecord::Classification(classification_metrics(
            &preds.classes(),
            &batch.classes,
            model.spec.num_classes,
        )?)),
        TaskMode::Regression => {
            let scores = preds.scores.as_deref().unwrap_or_default();
            let targets = batch
                .scores
                .as_deref()
                .ok_or_else(|| Error::contract("regression evaluation needs score targets"))?;
            Ok(MetricRecord::Regression(regression_metrics(scores, targets)?))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Every non-empty subset of modalities, the full set included.
    ModalityMissing,
    /// Entry-level dropout at p = 0, 0.1, ..., 0.9, plus the average.
    FeatureDropout,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality-missing" => Ok(Protocol::ModalityMissing),
            "feature-dropout" => Ok(Protocol::FeatureDropout),
            _ => Err(Error::Config(format!(
                "unknown protocol {s:?}; expected modality-missing or feature-dropout"
            ))),
        }
    }
}

/// Named evaluation condition and its metric entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub name: String,
    pub entries: Vec<(String, f64)>,
}

impl Condition {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }
}

pub const DROPOUT_RATES: usize = 10;

pub fn dropout_rate(k: usize) -> f64 {
    k as f64 / 10.0
}

fn dropout_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &format!("robust/dropout/{k}"))
}

/// Test batch for a named condition: `full`, `modality:<a+b>` or
/// `dropout:<p>` with p on the 0.1 grid. Same batches as [`run_robustness`].
pub fn condition_batch(test: &MultimodalBatch, condition: &str, seed: u64) -> Result<MultimodalBatch> {
    if condition == "full" {
        return Ok(test.clone());
    }
    if let Some(subset) = condition.strip_prefix("modality:") {
        let names: Vec<&str> = subset.split('+').collect();
        return apply_modality_missing(test, &names);
    }
    if let Some(p) = condition.strip_prefix("dropout:") {
        let p: f64 = p
            .parse()
            .map_err(|_| Error::Config(format!("bad dropout rate in condition {condition:?}")))?;
        let k = (p * 10.0).round();
        if !(0.0..DROPOUT_RATES as f64).contains(&k) || (k / 10.0 - p).abs() > 1e-9 {
            return Err(Error::Config(format!("dropout rate must be one of 0.0, 0.1, ..., 0.9, got {p}")));
        }
        return apply_feature_dropout(test, p, dropout_seed(seed, k as usize));
    }
    Err(Error::Config(format!(
        "unknown condition {condition:?}; expected full, modality:<a+b> or dropout:<p>"
    )))
}

pub fn run_robustness(model: &EbmcModel, plan: &RunPlan, test: &MultimodalBatch, protocol: Protocol) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    match protocol {
        Protocol::ModalityMissing => {
            for subset in nonempty_subsets(&test.modalities) {
                let batch = apply_modality_missing(test, &subset)?;
                out.push(Condition {
                    name: format!("modality:{}", subset_key(&subset)),
                    entries: evaluate(model, plan, &batch)?.entries(),
                });
            }
        }
        Protocol::FeatureDropout => {
            for k in 0..DROPOUT_RATES {
                let p = dropout_rate(k);
                let batch = apply_feature_dropout(test, p, dropout_seed(plan.seed(), k))?;
                out.push(Condition {
                    name: format!("dropout:{p:.1}"),
                    entries: evaluate(model, plan, &batch)?.entries(),
                });
            }
            let mut avg = out[0].entries.clone();
            for (i, (_, v)) in avg.iter_mut().enumerate() {
                *v = out.iter().map(|c| c.entries[i].1).sum::<f64>() / DROPOUT_RATES as f64;
            }
            out.push(Condition {
                name: "dropout:avg".into(),
                entries: avg,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub run: TrainedRun,
    pub metrics: MetricRecord,
}

/// Trains one model per ablation under the same seed. Ablations that agree
/// on MSD and CCE share the Stage I result.
pub fn run_ablation(cfg: &TrainConfig, data: &Dataset, ablations: &[Ablation]) -> Result<Vec<AblationResult>> {
    let mut stage1: HashMap<(bool, bool), TrainedRun> = HashMap::new();
    let mut out = Vec::with_capacity(ablations.len());
    for a in ablations {
        let plan = RunPlan::new(cfg.clone(), a.clone());
        let s1 = match stage1.get(&a.stage1_key()) {
            Some(r) => r.clone(),
            None => {
                let r = train_stage1(&plan, data)?;
                stage1.insert(a.stage1_key(), r.clone());
                r
            }
        };
        let run = train_stage2(&plan, s1, data)?;
        let metrics = evaluate(&run.model, &plan, &data.test)?;
        out.push(AblationResult {
            ablation: a.clone(),
            run,
            metrics,
        });
    }
    Ok(out)
}
