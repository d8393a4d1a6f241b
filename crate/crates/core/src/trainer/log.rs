//! Per-epoch run log and the CSV/JSONL files derived from it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunHeader;
use crate::emc::{EnergyComponents, EnergyReport};
use crate::error::{Error, Result};
use crate::fusion::TotalLossParts;
use crate::imtd::{TrustSummary, TrustWeights};
use crate::metrics::MetricRecord;
use crate::presence::Presence;

/// Worst-case trust-weight bookkeeping over the samples seen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrustAudit {
    pub samples: usize,
    /// max over samples of |Σ_m α − 1|.
    pub max_sum_error: f64,
    /// Largest α assigned to an absent modality.
    pub max_masked_alpha: f64,
    /// Smallest α overall.
    pub min_alpha: f64,
}

impl TrustAudit {
    pub fn absorb(&mut self, w: &TrustWeights, presence: &Presence) {
        if w.rows == 0 {
            return;
        }
        if self.samples == 0 {
            self.min_alpha = f64::INFINITY;
        }
        for i in 0..w.rows {
            let mut sum = 0.0;
            for m in 0..w.modalities {
                let a = w.alpha(i, m);
                sum += a;
                self.min_alpha = self.min_alpha.min(a);
                if !presence.is_present(i, m) {
                    self.max_masked_alpha = self.max_masked_alpha.max(a.abs());
                }
            }
            self.max_sum_error = self.max_sum_error.max((sum - 1.0).abs());
            self.samples += 1;
        }
    }

    pub fn merge(&mut self, other: &TrustAudit) {
        if other.samples == 0 {
            return;
        }
        if self.samples == 0 {
            *self = *other;
            return;
        }
        self.samples += other.samples;
        self.max_sum_error = self.max_sum_error.max(other.max_sum_error);
        self.max_masked_alpha = self.max_masked_alpha.max(other.max_masked_alpha);
        self.min_alpha = self.min_alpha.min(other.min_alpha);
    }
}

/// Epoch means of the component losses behind the MSD and CCE totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLosses {
    pub l_inv: f64,
    pub l_dis: f64,
    pub l_uni: f64,
    pub l_rec: f64,
    pub l_task_enh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Global epoch number, counted across both stages from 1.
    pub epoch: usize,
    pub stage: u8,
    pub batches: usize,
    /// Epoch means of the per-batch loss parts.
    pub losses: TotalLossParts,
    pub aux: AuxLosses,
    /// Batch-mean energies, Stage II only.
    pub energy: Option<EnergyReport>,
    pub trust: Vec<TrustSummary>,
    pub trust_audit: TrustAudit,
    /// Test-set metrics on evaluation epochs.
    pub eval: Option<Vec<(String, f64)>>,
    pub seconds: f64,
}

impl EpochLog {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn finish(
        epoch: usize,
        stage: u8,
        names: &[String],
        batches: usize,
        sums: TotalLossParts,
        msd: [f64; 4],
        cce: [f64; 3],
        energy: &[([f64; 4], f64, usize)],
        trust: &[[f64; 4]],
        trust_count: &[usize],
        trust_audit: TrustAudit,
        eval: Option<MetricRecord>,
        seconds: f64,
    ) -> Self {
        let nb = batches.max(1) as f64;
        let losses = TotalLossParts {
            l_task: sums.l_task / nb,
            l_msd: sums.l_msd / nb,
            l_cce: sums.l_cce / nb,
            l_emc: sums.l_emc / nb,
            l_imtd: sums.l_imtd / nb,
            l_total: sums.l_total / nb,
        };
        let aux = AuxLosses {
            l_inv: msd[0] / nb,
            l_dis: msd[1] / nb,
            l_uni: msd[2] / nb,
            l_rec: cce[0] / nb,
            l_task_enh: cce[1] / nb,
        };
        let seen: Vec<usize> = (0..energy.len()).filter(|&m| energy[m].2 > 0).collect();
        let energy = (!seen.is_empty()).then(|| {
            let comps: Vec<EnergyComponents> = seen
                .iter()
                .map(|&m| {
                    let (s, _, c) = energy[m];
                    let c = c as f64;
                    EnergyComponents {
                        e_magnitude: s[0] / c,
                        e_loss: s[1] / c,
                        e_uncertainty: s[2] / c,
                        e_total: s[3] / c,
                    }
                })
                .collect();
            let grads: Vec<f64> = seen.iter().map(|&m| energy[m].1 / energy[m].2 as f64).collect();
            let seen_names: Vec<String> = seen.iter().map(|&m| names[m].clone()).collect();
            EnergyReport::new(&seen_names, &comps, &grads)
        });
        let trust = if trust_count.iter().any(|&c| c > 0) {
            names
                .iter()
                .enumerate()
                .map(|(m, name)| {
                    let c = trust_count[m].max(1) as f64;
                    TrustSummary {
                        modality: name.clone(),
                        mean_sigma: trust[m][0] / c,
                        mean_c: trust[m][1] / c,
                        mean_rho: trust[m][2] / c,
                        mean_alpha: trust[m][3] / c,
                        count: trust_count[m],
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        EpochLog {
            epoch,
            stage,
            batches,
            losses,
            aux,
            energy,
            trust,
            trust_audit,
            eval: eval.map(|r| r.entries()),
            seconds,
        }
    }

    /// Copy with the wall-clock field cleared, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        EpochLog {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    /// Appends an epoch; epochs must increase and the stage may only step up.
    pub fn push(&mut self, e: EpochLog) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if e.epoch <= last.epoch || e.stage < last.stage {
                return Err(Error::contract(format!(
                    "epoch {} (stage {}) cannot follow epoch {} (stage {})",
                    e.epoch, e.stage, last.epoch, last.stage
                )));
            }
        }
        self.epochs.push(e);
        Ok(())
    }

    pub fn untimed(&self) -> RunLog {
        RunLog {
            epochs: self.epochs.iter().map(EpochLog::untimed).collect(),
        }
    }

    pub fn stage_epochs(&self, stage: u8) -> impl Iterator<Item = &EpochLog> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }

    /// Audit merged over every epoch.
    pub fn trust_audit(&self) -> TrustAudit {
        let mut a = TrustAudit::default();
        for e in &self.epochs {
            a.merge(&e.trust_audit);
        }
        a
    }
}

/// One line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub condition: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn from_record(run_id: &str, condition: &str, seed: u64, entries: &[(String, f64)]) -> Vec<MetricRow> {
        entries
            .iter()
            .map(|(metric, value)| MetricRow {
                run_id: run_id.into(),
                condition: condition.into(),
                seed,
                metric: metric.clone(),
                value: *value,
            })
            .collect()
    }
}

fn write_text(path: &Path, header: &RunHeader, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format!("# {}\n{body}", header.line())).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, header: &RunHeader, rows: &[MetricRow]) -> Result<()> {
    let mut body = String::from("run_id,condition,seed,metric,value\n");
    for r in rows {
        let _ = writeln!(body, "{},{},{},{},{}", r.run_id, r.condition, r.seed, r.metric, r.value);
    }
    write_text(path, header, &body)
}

pub fn write_energy_csv(path: &Path, header: &RunHeader, log: &RunLog) -> Result<()> {
    let mut body = String::from("epoch,modality,e_magnitude,e_loss,e_uncertainty,e_total,grad_norm_sq,implicit_weight\n");
    for e in &log.epochs {
        for m in e.energy.iter().flat_map(|r| &r.modalities) {
            let _ = writeln!(
                body,
                "{},{},{},{},{},{},{},{}",
                e.epoch, m.modality, m.e_magnitude, m.e_loss, m.e_uncertainty, m.e_total, m.grad_norm_sq, m.implicit_weight
            );
        }
    }
    write_text(path, header, &body)
}

pub fn write_trust_csv(path: &Path, header: &RunHeader, log: &RunLog) -> Result<()> {
    let mut body = String::from("epoch,modality,mean_sigma,mean_c,mean_rho,mean_alpha\n");
    for e in &log.epochs {
        for t in &e.trust {
            let _ = writeln!(
                body,
                "{},{},{},{},{},{}",
                e.epoch, t.modality, t.mean_sigma, t.mean_c, t.mean_rho, t.mean_alpha
            );
        }
    }
    write_text(path, header, &body)
}

pub fn write_runlog(path: &Path, header: &RunHeader, log: &RunLog) -> Result<()> {
    let mut body = String::new();
    for e in &log.epochs {
        body.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        body.push('\n');
    }
    write_text(path, header, &body)
}
