//! The interface every trainable perspectivist system implements.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{DenseRecord, PerspectivistCorpus};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::ParamBreakdown;
use crate::nn::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Hypernet,
    SingleTask,
    Aart,
    Ae,
    SeparateLora,
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] = [
        SystemKind::SingleTask,
        SystemKind::Aart,
        SystemKind::Ae,
        SystemKind::SeparateLora,
        SystemKind::Hypernet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Hypernet => "hypernet",
            SystemKind::SingleTask => "single_task",
            SystemKind::Aart => "aart",
            SystemKind::Ae => "ae",
            SystemKind::SeparateLora => "separate_lora",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "system",
                    format!("unknown system `{s}` (expected hypernet, single_task, aart, ae or separate_lora)"),
                )
            })
    }
}

/// Token ids for every corpus item, indexed like `corpus.items()`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    seqs: Vec<Vec<usize>>,
}

impl TokenizedCorpus {
    pub fn new(corpus: &PerspectivistCorpus, config: &EncoderConfig) -> Self {
        Self {
            seqs: corpus
                .items()
                .iter()
                .map(|it| crate::encoder::tokenize(&it.text, config))
                .collect(),
        }
    }

    pub fn from_seqs(seqs: Vec<Vec<usize>>) -> Self {
        Self { seqs }
    }

    pub fn get(&self, item: usize) -> &[usize] {
        &self.seqs[item]
    }

    pub fn batch(&self, items: impl IntoIterator<Item = usize>) -> Vec<&[usize]> {
        items.into_iter().map(|i| self.seqs[i].as_slice()).collect()
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Where a training step sits in the run; drives dropout masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub seed: u64,
    pub step: u64,
    pub dropout_p: f64,
}

const DROPOUT_STREAM: u64 = 0x4452_4f50;

impl StepContext {
    /// Inverted-dropout mask (`0` or `1/(1-p)`), fixed by seed, step and tag.
    pub fn mask(&self, rows: usize, cols: usize, tag: u64) -> Option<Array2<f64>> {
        if self.dropout_p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.dropout_p);
        let mut rng = rng_for(self.seed, &[DROPOUT_STREAM, self.step, tag]);
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < self.dropout_p {
                0.0
            } else {
                keep
            }
        }))
    }
}

pub trait PerspectiveModel: Send {
    fn kind(&self) -> SystemKind;

    /// Training examples derived from the training records. Systems trained
    /// on aggregated labels override this.
    fn examples(&self, corpus: &PerspectivistCorpus, train: &[usize]) -> Vec<DenseRecord> {
        train.iter().map(|&r| corpus.dense()[r]).collect()
    }

    /// One optimiser step on `batch`; returns the mean loss.
    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64>;

    /// Deterministic predictions, one per record.
    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>>;

    fn trainable(&self) -> ParamBreakdown;

    /// Checksum of parameters that must not move during training, if any.
    fn frozen_checksum(&self) -> Option<String> {
        None
    }

    /// Sets the optimiser learning rate; the optimiser state is kept.
    fn set_learning_rate(&mut self, lr: f64);

    fn to_checkpoint(&self) -> Checkpoint;
}

/// Records grouped by annotator, preserving order within each group.
pub fn group_by_annotator(records: &[DenseRecord]) -> BTreeMap<usize, Vec<(usize, DenseRecord)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, DenseRecord)>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        groups.entry(r.annotator).or_default().push((pos, *r));
    }
    groups
}

/// Argmax per row.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits.rows().into_iter().map(crate::nn::argmax).collect()
}

/// Mean cross-entropy over rows and its gradient (already divided by `n`).
pub fn batch_cross_entropy(logits: &Array2<f64>, labels: &[usize], n: usize) -> (f64, Array2<f64>) {
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let (loss, d) = crate::nn::cross_entropy(logits.row(i), y);
        total += loss;
        grad.row_mut(i).assign(&(d / n as f64));
    }
    (total / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_names_round_trip() {
        for k in SystemKind::ALL {
            assert_eq!(k.name().parse::<SystemKind>().unwrap(), k);
        }
        let err = "lora".parse::<SystemKind>().unwrap_err();
        assert!(err.to_string().contains("system"));
    }

    #[test]
    fn dropout_mask_depends_on_step_only_through_context() {
        let ctx = StepContext { seed: 4, step: 2, dropout_p: 0.5 };
        assert_eq!(ctx.mask(3, 4, 1), ctx.mask(3, 4, 1));
        let other = StepContext { step: 3, ..ctx };
        assert_ne!(ctx.mask(3, 4, 1), other.mask(3, 4, 1));
        let m = ctx.mask(50, 50, 0).unwrap();
        assert!(m.iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(StepContext { dropout_p: 0.0, ..ctx }.mask(2, 2, 0).is_none());
    }
}
