//! Datasets, the IDX container, synthetic fixtures and checkpoints.

pub mod checkpoint;
pub mod idx;
pub mod imbalance;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as rows of a `[N, height * width]` tensor, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub split: Split,
    pub notes: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, height: usize, width: usize, labels: Vec<u8>, split: Split) -> Result<Self> {
        let n = labels.len();
        if images.shape() != [n, height * width] {
            return Err(Error::Data(format!(
                "{n} labels but images are {:?}, expected [{n}, {}]",
                images.shape(),
                height * width
            )));
        }
        if let Some(pos) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "pixel {} of image {} is {} (outside [0, 1])",
                pos % (height * width).max(1),
                pos / (height * width).max(1),
                images.data()[pos]
            )));
        }
        Ok(LabeledDataset {
            images,
            height,
            width,
            labels,
            split,
            notes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledDataset {
            images: self.images.select_rows(idx),
            height: self.height,
            width: self.width,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            notes: self.notes.clone(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_miscounted() {
        let bad = Tensor::new(vec![1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(LabeledDataset::new(bad, 1, 2, vec![0], Split::Train), Err(Error::Data(_))));
        let ok = Tensor::zeros(&[2, 4]);
        assert!(LabeledDataset::new(ok, 2, 2, vec![0], Split::Train).is_err());
    }
}
