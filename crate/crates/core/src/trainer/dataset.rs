//! Train/test splits on disk.
//!
//! ```text
//! <dir>/spec.json          generator spec
//! <dir>/train/, <dir>/test/  batch directories (see `synth` I/O)
//! <dir>/bayes_oracle.json  oracle accuracy per modality subset on the test split
//! ```

use std::fs;
use std::path::Path;

use super::RunHeader;
use crate::error::{Error, Result};
use crate::synth::{bayes_oracle, generate_split, read_batch_dir, write_batch_dir, BayesOracleReport, GeneratorSpec, MultimodalBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub train: MultimodalBatch,
    pub test: MultimodalBatch,
}

impl Dataset {
    pub fn generate(spec: &GeneratorSpec, n_train: usize, n_test: usize) -> Result<Self> {
        Ok(Dataset {
            spec: spec.clone(),
            train: generate_split(spec, n_train, "train")?,
            test: generate_split(spec, n_test, "test")?,
        })
    }

    pub fn oracle(&self) -> Result<BayesOracleReport> {
        bayes_oracle(&self.spec, &self.test)
    }

    pub fn write(&self, dir: &Path, header: &RunHeader) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let h = header.line();
        let json = |v: String| format!("# {h}\n{v}\n");
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(dir.join("spec.json"), json(spec)).map_err(|e| Error::io(dir.join("spec.json"), e))?;
        write_batch_dir(&dir.join("train"), &self.train, Some(&h))?;
        write_batch_dir(&dir.join("test"), &self.test, Some(&h))?;
        let oracle = serde_json::to_string_pretty(&self.oracle()?).expect("oracle serializes");
        let path = dir.join("bayes_oracle.json");
        fs::write(&path, json(oracle)).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("spec.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: GeneratorSpec =
            serde_json::from_str(&strip_comments(&text)).map_err(|e| Error::format(&path, e.to_string()))?;
        spec.validate()?;
        let data = Dataset {
            train: read_batch_dir(&dir.join("train"))?,
            test: read_batch_dir(&dir.join("test"))?,
            spec,
        };
        for b in [&data.train, &data.test] {
            if b.modalities != data.spec.modality_names() {
                return Err(Error::format(dir, "split modalities differ from spec.json"));
            }
            b.check_invariants()?;
        }
        Ok(data)
    }
}

/// Drops `#` comment lines (file headers) from JSON text.
pub(crate) fn strip_comments(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}
