//! Run configuration: a TOML file with one table per component.
//!
//! ```toml
//! [train]
//! stage1_epochs = 60
//! stage2_epochs = 60
//! learning_rate = 0.001
//! batch_size = 32
//!
//! [emc]
//! lambda_flow = 0.05
//! ```
//!
//! The four `[train]` keys above are required; everything else has a default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cce::CceConfig;
use crate::emc::EnergyCoefficients;
use crate::error::{Error, Result};
use crate::fusion::ObjectiveWeights;
use crate::imtd::DistillConfig;
use crate::model::ModelDims;
use crate::msd::MsdConfig;

pub const REQUIRED_KEYS: [&str; 4] = ["stage1_epochs", "stage2_epochs", "learning_rate", "batch_size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stage2_freeze_stage1: bool,
    #[serde(default = "yes")]
    pub keep_stage1_losses: bool,
    /// Per-sample, per-modality drop probability applied to training batches.
    #[serde(default)]
    pub missing_rate: f64,
    /// Test-set evaluation period in epochs; the last epoch is always evaluated.
    #[serde(default = "ten")]
    pub eval_every: usize,
}

fn yes() -> bool {
    true
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub objective: ObjectiveWeights,
    #[serde(default)]
    pub msd: MsdConfig,
    #[serde(default)]
    pub cce: CceConfig,
    #[serde(default)]
    pub emc: EnergyCoefficients,
    #[serde(default)]
    pub imtd: DistillConfig,
}

impl Default for TrainConfig {
    /// Desk-scale schedule used by the acceptance runs: plain SGD at 1e-3.
    fn default() -> Self {
        TrainConfig {
            train: TrainSection {
                stage1_epochs: 60,
                stage2_epochs: 60,
                learning_rate: 0.001,
                batch_size: 32,
                momentum: 0.0,
                seed: 0,
                stage2_freeze_stage1: false,
                keep_stage1_losses: true,
                missing_rate: 0.0,
                eval_every: 10,
            },
            model: ModelDims::default(),
            objective: ObjectiveWeights::default(),
            msd: MsdConfig::default(),
            cce: CceConfig::default(),
            emc: EnergyCoefficients::default(),
            imtd: DistillConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        // Required keys are checked by name first so the message is specific.
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let at = e.span().map(|s| format!(" (line {})", line_of(text, s.start))).unwrap_or_default();
            Error::Config(format!("{}{at}", e.message()))
        })?;
        let train = table
            .get("train")
            .and_then(|t| t.as_table())
            .ok_or_else(|| Error::Config("missing required section [train]".into()))?;
        for key in REQUIRED_KEYS {
            if !train.contains_key(key) {
                return Err(Error::Config(format!("missing required key train.{key}")));
            }
        }
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (line {})", line_of(text, s.start))).unwrap_or_default();
            Error::Config(format!("{}{at}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.stage1_epochs == 0 || t.stage2_epochs == 0 {
            return Err(Error::Config("train.stage1_epochs and train.stage2_epochs must be >= 1".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::Config(format!("train.batch_size must be >= 2, got {}", t.batch_size)));
        }
        if !(t.learning_rate >= 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate must be >= 0, got {}", t.learning_rate)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", t.momentum)));
        }
        if !(0.0..1.0).contains(&t.missing_rate) {
            return Err(Error::Config(format!("train.missing_rate must lie in [0, 1), got {}", t.missing_rate)));
        }
        if t.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        let d = &self.model;
        if [d.hidden, d.rep, d.shared, d.specific, d.fusion_hidden].contains(&0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.objective.validate().map_err(wrap)?;
        self.emc.validate().map_err(wrap)?;
        self.imtd.validate().map_err(wrap)?;
        if !(self.msd.tau > 0.0) || self.msd.lambda1 < 0.0 || self.msd.lambda2 < 0.0 {
            return Err(Error::Config("msd.tau must be > 0 and msd.lambda1/lambda2 >= 0".into()));
        }
        if self.cce.gamma < 0.0 || self.cce.noise_scale < 0.0 {
            return Err(Error::Config("cce.gamma and cce.noise_scale must be >= 0".into()));
        }
        Ok(())
    }

    /// Git-style blob hash of the resolved config with the seed zeroed, so
    /// runs that differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.seed = 0;
        content_hash(&c.to_toml())
    }
}

/// SHA-256 over `blob <len>\0<text>`, hex encoded.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()));
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[train]\nstage1_epochs = 2\nstage2_epochs = 3\nlearning_rate = 0.01\nbatch_size = 8\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train.stage2_epochs, 3);
        assert_eq!(c.objective, ObjectiveWeights::default());
        assert!(c.train.keep_stage1_losses);
        assert_eq!(c.emc.lambda_flow, 0.05);
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("learning_rate = 0.01\n", "");
        let e = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("train.learning_rate"), "{e}");
    }

    #[test]
    fn bad_value_reports_line() {
        let text = format!("{MINIMAL}\n[emc]\nalpha_e = \"one\"\n");
        let e = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("line 8"), "{e}");
        let text = format!("{MINIMAL}\n[emc]\nbogus = 1\n");
        assert!(TrainConfig::from_toml(&text).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.train.seed = 99;
        assert_eq!(a.hash(), b.hash());
        b.train.learning_rate = 0.02;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        // same construction as `git hash-object`, with SHA-256
        assert_eq!(
            content_hash(""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn toml_round_trip() {
        let a = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&a.to_toml()).unwrap(), a);
    }
}
