//! Low-rank adapter factors and per-layer adapter sets.
//!
//! A patched projection computes `W x + (alpha / r) * B (A x)`. The low-rank
//! path is always evaluated as two thin products so the `d_out x d_in` update
//! is never formed.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::DenseRecord;
use crate::encoder::{ClassifierHead, Encoder};
use crate::error::{Error, Result};
use crate::nn::{rng_for, uniform_matrix};
use crate::params::{Adam, AdamSettings, ParamSet};
use crate::system::{StepContext, TokenizedCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

/// One adaptable (layer, projection) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetKey {
    pub layer: usize,
    pub projection: Projection,
}

impl TargetKey {
    pub fn new(layer: usize, projection: Projection) -> Self {
        Self { layer, projection }
    }
}

impl fmt::Display for TargetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.projection.short())
    }
}

/// Query and value projections of every attention block, layer-major.
pub fn attention_targets(num_layers: usize) -> Vec<TargetKey> {
    (0..num_layers)
        .flat_map(|l| [TargetKey::new(l, Projection::Query), TargetKey::new(l, Projection::Value)])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `[r, d_in]`
    pub a: Array2<f64>,
    /// `[d_out, r]`
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn new(a: Array2<f64>, b: Array2<f64>, alpha: f64) -> Result<Self> {
        let r = a.nrows();
        if r == 0 {
            return Err(Error::contract("LoRA rank must be >= 1"));
        }
        if b.ncols() != r {
            return Err(Error::contract(format!(
                "LoRA factor ranks disagree: A has {r} rows, B has {} columns",
                b.ncols()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::contract(format!("LoRA alpha must be > 0, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn zeros(rank: usize, d_in: usize, d_out: usize, alpha: f64) -> Self {
        Self {
            a: Array2::zeros((rank, d_in)),
            b: Array2::zeros((d_out, rank)),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    /// `alpha / r`
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Low-rank contribution for a row batch: `s * (X A^T) B^T`, plus the
    /// `X A^T` intermediate needed by the backward pass.
    pub fn delta_rows(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let xa = x.dot(&self.a.t());
        let mut out = xa.dot(&self.b.t());
        out *= self.scale();
        (out, xa)
    }

    /// Backward of [`delta_rows`](Self::delta_rows): accumulates `dA`, `dB`
    /// into `grad` and returns the input gradient of the low-rank path.
    pub fn backward_rows(
        &self,
        x: ArrayView2<f64>,
        xa: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: Option<&mut LoraFactors>,
    ) -> Array2<f64> {
        let s = self.scale();
        let mut dxa = dy.dot(&self.b);
        dxa *= s;
        if let Some(g) = grad {
            ndarray::linalg::general_mat_mul(s, &dy.t(), &xa, 1.0, &mut g.b);
            ndarray::linalg::general_mat_mul(1.0, &dxa.t(), &x, 1.0, &mut g.a);
        }
        dxa.dot(&self.a)
    }
}

impl ParamSet for LoraFactors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("a", self.a.shape(), self.a.as_slice().expect("contiguous"));
        f("b", self.b.shape(), self.b.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.a.shape().to_vec();
        f("a", &shape, self.a.as_slice_mut().expect("contiguous"));
        let shape = self.b.shape().to_vec();
        f("b", &shape, self.b.as_slice_mut().expect("contiguous"));
    }
}

/// `W x + (alpha/r) B (A x)`.
pub fn apply(x: ArrayView1<f64>, w: ArrayView2<f64>, f: &LoraFactors) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || f.d_in() != x.len() || f.d_out() != w.nrows() {
        return Err(Error::contract(format!(
            "shape mismatch: x has {} entries, W is {}x{}, LoRA maps {} -> {}",
            x.len(),
            w.nrows(),
            w.ncols(),
            f.d_in(),
            f.d_out()
        )));
    }
    let ax = f.a.dot(&x);
    let mut out = w.dot(&x);
    out.scaled_add(f.scale(), &f.b.dot(&ax));
    Ok(out)
}

/// Adapter factors for a set of targets, sharing one `(rank, alpha)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    factors: BTreeMap<TargetKey, LoraFactors>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-initialised factors for every target (gradient buffers).
    pub fn zeros(targets: &[TargetKey], rank: usize, d: usize, alpha: f64) -> Self {
        Self {
            factors: targets
                .iter()
                .map(|&t| (t, LoraFactors::zeros(rank, d, d, alpha)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            factors: self
                .factors
                .iter()
                .map(|(&k, f)| (k, LoraFactors::zeros(f.rank(), f.d_in(), f.d_out(), f.alpha)))
                .collect(),
        }
    }

    pub fn insert(&mut self, key: TargetKey, factors: LoraFactors) -> Result<()> {
        if let Some(first) = self.factors.values().next() {
            if first.rank() != factors.rank() || first.alpha != factors.alpha {
                return Err(Error::contract(format!(
                    "adapter for {key} has (r={}, alpha={}), set uses (r={}, alpha={})",
                    factors.rank(),
                    factors.alpha,
                    first.rank(),
                    first.alpha
                )));
            }
        }
        self.factors.insert(key, factors);
        Ok(())
    }

    pub fn get(&self, key: &TargetKey) -> Option<&LoraFactors> {
        self.factors.get(key)
    }

    pub fn get_mut(&mut self, key: &TargetKey) -> Option<&mut LoraFactors> {
        self.factors.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TargetKey, &LoraFactors)> {
        self.factors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &TargetKey> {
        self.factors.keys()
    }

    /// Same factors with the low-rank path scaled by `c` (applied to `B`).
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for f in out.factors.values_mut() {
            f.b *= c;
        }
        out
    }
}

impl ParamSet for AdapterSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, fac) in &self.factors {
            crate::params::visit_child(&k.to_string(), fac, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, fac) in self.factors.iter_mut() {
            crate::params::visit_child_mut(&k.to_string(), fac, f);
        }
    }
}

/// One annotator's adapters, classifier head and optimiser over a shared
/// frozen encoder.
#[derive(Clone, Debug)]
pub struct AnnotatorAdapter {
    pub adapters: AdapterSet,
    pub head: ClassifierHead,
    pub adam: Adam,
}

impl AnnotatorAdapter {
    /// `A ~ U(-1/sqrt(d), 1/sqrt(d))`, `B = 0`; the head starts from the
    /// encoder's head.
    pub fn new(encoder: &Encoder, rank: usize, alpha: f64, lr: f64, mut rng: ChaCha8Rng) -> Result<Self> {
        let d = encoder.config.hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut adapters = AdapterSet::new();
        for key in encoder.config.targets() {
            let a = uniform_matrix(rank, d, bound, &mut rng);
            adapters.insert(key, LoraFactors::new(a, Array2::zeros((d, rank)), alpha)?)?;
        }
        Ok(Self {
            adapters,
            head: encoder.head.clone(),
            adam: Adam::new(lr, AdamSettings::default()),
        })
    }

    pub fn logits(&self, encoder: &Encoder, seqs: &[&[usize]]) -> Result<Array2<f64>> {
        let (pooled, _) = encoder.encode_batch(seqs, Some(&self.adapters))?;
        Ok(self.head.forward(pooled.view()).0)
    }

    /// One Adam step on `records`, all of which belong to this annotator.
    pub fn train_step(
        &mut self,
        encoder: &Encoder,
        records: &[DenseRecord],
        tokens: &TokenizedCorpus,
        ctx: StepContext,
    ) -> Result<f64> {
        let seqs = tokens.batch(records.iter().map(|r| r.item));
        let (pooled, trace) = encoder.encode_batch(&seqs, Some(&self.adapters))?;
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let mut head_grad = self.head.zeros_like();
        let (loss, d) = crate::baselines::head_step(&self.head, pooled, &labels, ctx, &mut head_grad);
        let mut grad = self.adapters.zeros_like();
        encoder.backward_encode(&trace, Some(&self.adapters), d.view(), None, Some(&mut grad));
        self.adam
            .step_parts(&mut [&mut self.adapters, &mut self.head], &[&grad, &head_grad]);
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparateSettings {
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

/// Fits adapters and a head on one annotator's records alone.
pub fn train_separate_adapter(
    encoder: &Encoder,
    records: &[DenseRecord],
    tokens: &TokenizedCorpus,
    settings: &SeparateSettings,
) -> Result<AnnotatorAdapter> {
    if records.is_empty() {
        return Err(Error::contract("annotator has no training records"));
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let s = settings;
    let mut adapter = AnnotatorAdapter::new(encoder, s.rank, s.alpha, s.learning_rate, rng_for(s.seed, &[0x4144_4150]))?;
    let mut order: Vec<DenseRecord> = records.to_vec();
    let mut step = 0u64;
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng_for(s.seed, &[0x5348_5546, epoch as u64]));
        for chunk in order.chunks(s.batch_size) {
            let ctx = StepContext {
                seed: s.seed,
                step,
                dropout_p: s.dropout_p,
            };
            let loss = adapter.train_step(encoder, chunk, tokens, ctx)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: step as usize,
                    lr: s.learning_rate,
                });
            }
            step += 1;
        }
    }
    Ok(adapter)
}
