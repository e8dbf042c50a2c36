//! Perspectivist evaluation suite and trainable-parameter accounting.
//!
//! All scoring functions take the corpus, a list of record indices (usually a
//! split's test set), and one predicted label per listed record.

pub mod accountant;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{disagreement, PerspectivistCorpus};
use crate::error::{Error, Result};

pub use accountant::ParamBreakdown;

/// Unweighted mean of per-class F1. Classes absent from both `gold` and
/// `pred` are left out of the mean.
pub fn macro_f1(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "macro_f1 length mismatch: {} gold vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::contract("macro_f1 of an empty sequence"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= num_classes || p >= num_classes {
            return Err(Error::contract(format!("label out of range for {num_classes} classes")));
        }
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        present += 1;
    }
    Ok(sum / present as f64)
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    hits as f64 / gold.len() as f64
}

fn check_alignment(records: &[usize], predictions: &[usize]) -> Result<()> {
    if records.len() != predictions.len() {
        return Err(Error::contract(format!(
            "{} records but {} predictions",
            records.len(),
            predictions.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::contract("no records to evaluate"));
    }
    Ok(())
}

/// Macro-F1 per annotator over their own records, then the plain mean over
/// annotators. Returns the mean and the per-annotator scores keyed by dense
/// annotator index.
pub fn annotator_level_f1(
    corpus: &PerspectivistCorpus,
    records: &[usize],
    predictions: &[usize],
) -> Result<(f64, BTreeMap<usize, f64>)> {
    check_alignment(records, predictions)?;
    let mut by_annotator: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (&r, &p) in records.iter().zip(predictions) {
        let rec = corpus.dense()[r];
        let entry = by_annotator.entry(rec.annotator).or_default();
        entry.0.push(rec.label);
        entry.1.push(p);
    }
    let absent = corpus.num_annotators() - by_annotator.len();
    if absent > 0 {
        log::debug!("{absent} annotator(s) without evaluation records excluded");
    }
    let mut scores = BTreeMap::new();
    for (a, (gold, pred)) in &by_annotator {
        scores.insert(*a, macro_f1(gold, pred, corpus.num_classes())?);
    }
    let mean = scores.values().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

/// Macro-F1 and accuracy over all pooled (item, annotator) pairs.
pub fn global_f1_and_accuracy(
    corpus: &PerspectivistCorpus,
    records: &[usize],
    predictions: &[usize],
) -> Result<(f64, f64)> {
    check_alignment(records, predictions)?;
    let gold: Vec<usize> = records.iter().map(|&r| corpus.dense()[r].label).collect();
    let f1 = macro_f1(&gold, predictions, corpus.num_classes())?;
    Ok((f1, accuracy(&gold, predictions)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationAbsence {
    TooFewItems,
    ZeroVarianceGold,
    ZeroVariancePredicted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correlation {
    Value(f64),
    Absent(CorrelationAbsence),
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Absent(_) => None,
        }
    }
}

/// Pearson correlation without the `n-1` factor (it cancels).
pub fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    if x.len() < 2 {
        return Correlation::Absent(CorrelationAbsence::TooFewItems);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Correlation::Absent(CorrelationAbsence::ZeroVarianceGold);
    }
    if syy == 0.0 {
        return Correlation::Absent(CorrelationAbsence::ZeroVariancePredicted);
    }
    Correlation::Value((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Gold and predicted item disagreement, over the same annotators per item,
/// correlated across items. Item order follows first appearance in `records`.
pub fn disagreement_correlation(
    corpus: &PerspectivistCorpus,
    records: &[usize],
    predictions: &[usize],
) -> Result<Correlation> {
    check_alignment(records, predictions)?;
    let mut order = Vec::new();
    let mut votes: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (&r, &p) in records.iter().zip(predictions) {
        let rec = corpus.dense()[r];
        let entry = votes.entry(rec.item).or_insert_with(|| {
            order.push(rec.item);
            Default::default()
        });
        entry.0.push(rec.label);
        entry.1.push(p);
    }
    let mut gold = Vec::with_capacity(order.len());
    let mut pred = Vec::with_capacity(order.len());
    for item in order {
        let (g, p) = &votes[&item];
        gold.push(disagreement(g)?);
        pred.push(disagreement(p)?);
    }
    Ok(pearson(&gold, &pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub annotator_f1: f64,
    pub global_f1: f64,
    pub global_accuracy: f64,
    pub disagreement_corr: Option<f64>,
    pub disagreement_corr_reason: Option<CorrelationAbsence>,
    pub trainable_params: u64,
    pub params_breakdown: Vec<(String, u64)>,
    pub per_annotator_f1: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Micro-F1 over pooled pairs; equals accuracy for single-label data.
    pub fn micro_f1(&self) -> f64 {
        self.global_accuracy
    }
}

pub fn evaluate(
    corpus: &PerspectivistCorpus,
    records: &[usize],
    predictions: &[usize],
    params: &ParamBreakdown,
) -> Result<MetricsReport> {
    let (annotator_f1, per) = annotator_level_f1(corpus, records, predictions)?;
    let (global_f1, global_accuracy) = global_f1_and_accuracy(corpus, records, predictions)?;
    let corr = disagreement_correlation(corpus, records, predictions)?;
    let (disagreement_corr, disagreement_corr_reason) = match corr {
        Correlation::Value(v) => (Some(v), None),
        Correlation::Absent(r) => (None, Some(r)),
    };
    Ok(MetricsReport {
        annotator_f1,
        global_f1,
        global_accuracy,
        disagreement_corr,
        disagreement_corr_reason,
        trainable_params: params.total(),
        params_breakdown: params.components.clone(),
        per_annotator_f1: per
            .into_iter()
            .map(|(a, s)| (corpus.annotators().id(a).to_string(), s))
            .collect(),
    })
}
