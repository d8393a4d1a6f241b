//! Per-sample modality presence and the constant masks derived from it.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synth::MultimodalBatch;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Presence {
    rows: usize,
    modalities: usize,
    flags: Vec<bool>,
}

impl Presence {
    pub fn new(rows: usize, modalities: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != rows * modalities {
            return Err(Error::contract(format!(
                "presence mask has {} flags for {rows}x{modalities}",
                flags.len()
            )));
        }
        Ok(Presence {
            rows,
            modalities,
            flags,
        })
    }

    pub fn all(rows: usize, modalities: usize) -> Self {
        Presence {
            rows,
            modalities,
            flags: vec![true; rows * modalities],
        }
    }

    pub fn from_batch(batch: &MultimodalBatch) -> Self {
        Presence {
            rows: batch.len(),
            modalities: batch.num_modalities(),
            flags: batch.present.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_present(&self, row: usize, modality: usize) -> bool {
        self.flags[row * self.modalities + modality]
    }

    pub fn count(&self, row: usize) -> usize {
        self.flags[row * self.modalities..(row + 1) * self.modalities]
            .iter()
            .filter(|&&p| p)
            .count()
    }

    pub fn rows_of(&self, modality: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.is_present(i, modality)).collect()
    }

    /// Number of present modalities other than `modality` in `row`.
    pub fn others(&self, row: usize, modality: usize) -> usize {
        self.count(row) - usize::from(self.is_present(row, modality))
    }

    /// n×width tensor holding `f(row)` in every column of that row.
    pub fn row_tensor(&self, width: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(self.rows, width, |i, _| f(i))
    }

    /// 0/1 indicator of `modality`, broadcast to `width` columns.
    pub fn indicator(&self, modality: usize, width: usize) -> Tensor {
        self.row_tensor(width, |i| if self.is_present(i, modality) { 1.0 } else { 0.0 })
    }
}
