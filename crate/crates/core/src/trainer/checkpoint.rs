//! Checkpoint files.
//!
//! A `#` header line with run id and config hash, then one JSON document:
//!
//! ```text
//! # run_id=seed7, config_hash=3f0c...
//! {"format":"ebmc-checkpoint","version":1,"spec":{...},
//!  "params":[{"name":"encoder.text.l1.w","rows":16,"cols":16,"data":[...]}, ...],
//!  "run":{"config":{...},"ablation":["Emc"]}}
//! ```
//!
//! `run` is optional; when present it records how the model was trained so
//! evaluation can reproduce the same refinement and enhancement settings.
//!
//! Floats are written with shortest round-trip formatting, so a load
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ablation, RunHeader, RunPlan, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{EbmcModel, ModelSpec};

const FORMAT: &str = "ebmc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredRun {
    config: TrainConfig,
    ablation: Ablation,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    spec: ModelSpec,
    params: Vec<StoredParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<StoredRun>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub model: EbmcModel,
    pub header: Option<RunHeader>,
    pub plan: Option<RunPlan>,
}

pub fn to_string(model: &EbmcModel, header: &RunHeader, plan: Option<&RunPlan>) -> String {
    let stored = Stored {
        format: FORMAT.into(),
        version: VERSION,
        spec: model.spec.clone(),
        params: model
            .store
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect(),
        run: plan.map(|p| StoredRun {
            config: p.cfg.clone(),
            ablation: p.ablation.clone(),
        }),
    };
    let json = serde_json::to_string(&stored).expect("checkpoint serializes");
    format!("# {}\n{json}\n", header.line())
}

pub fn from_str(text: &str, origin: &Path) -> Result<Loaded> {
    let header = text.lines().next().and_then(RunHeader::parse_comment);
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let stored: Stored = serde_json::from_str(&body).map_err(|e| Error::format(origin, e.to_string()))?;
    if stored.format != FORMAT || stored.version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported checkpoint {} v{}", stored.format, stored.version),
        ));
    }
    let mut model = EbmcModel::new(stored.spec, 0)?;
    if stored.params.len() != model.store.len() {
        return Err(Error::format(
            origin,
            format!("expected {} parameters, found {}", model.store.len(), stored.params.len()),
        ));
    }
    for (p, s) in model.store.iter_mut().zip(stored.params) {
        if p.name != s.name || p.value.shape() != (s.rows, s.cols) {
            return Err(Error::format(
                origin,
                format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    s.name,
                    (s.rows, s.cols)
                ),
            ));
        }
        p.value = Tensor::new(s.rows, s.cols, s.data).map_err(|e| Error::format(origin, e.to_string()))?;
    }
    let plan = stored.run.map(|r| RunPlan::new(r.config, r.ablation));
    Ok(Loaded { model, header, plan })
}

pub fn save(path: &Path, model: &EbmcModel, header: &RunHeader, plan: Option<&RunPlan>) -> Result<()> {
    fs::write(path, to_string(model, header, plan)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}
