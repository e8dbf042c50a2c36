//! Comparison systems: single-task (majority labels), AART (additive
//! annotator embeddings) and AE (gated annotator and annotation embeddings),
//! plus one independent adapter per annotator.
//!
//! The single-task, AART and AE encoders are fully trainable.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{majority_label, DenseRecord, PerspectivistCorpus};
use crate::encoder::{ClassifierHead, EncodeTrace, Encoder, EncoderBody};
use crate::error::{Error, Result};
use crate::lora::AnnotatorAdapter;
use crate::metrics::ParamBreakdown;
use crate::nn::{normal_matrix, rng_for};
use crate::params::{Adam, AdamSettings, ParamSet};
use crate::system::{argmax_rows, batch_cross_entropy, PerspectiveModel, StepContext, SystemKind, TokenizedCorpus};

const EVAL_CHUNK: usize = 256;

/// Encodes each distinct item of a batch once and remembers which pooled row
/// every record uses.
struct EncodePass {
    row_of: Vec<usize>,
    pooled: Array2<f64>,
    trace: EncodeTrace,
    num_unique: usize,
}

impl EncodePass {
    fn new(encoder: &Encoder, batch: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Self> {
        let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut unique = Vec::new();
        let row_of = batch
            .iter()
            .map(|r| {
                *slot.entry(r.item).or_insert_with(|| {
                    unique.push(r.item);
                    unique.len() - 1
                })
            })
            .collect();
        let (pooled, trace) = encoder.encode_batch(&tokens.batch(unique.iter().copied()), None)?;
        Ok(Self {
            row_of,
            pooled,
            trace,
            num_unique: unique.len(),
        })
    }

    fn record_pooled(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.row_of.len(), self.pooled.ncols()));
        for (i, &r) in self.row_of.iter().enumerate() {
            out.row_mut(i).assign(&self.pooled.row(r));
        }
        out
    }

    fn backward(&self, encoder: &Encoder, d_record: &Array2<f64>, grad: &mut EncoderBody) {
        let mut d = Array2::zeros((self.num_unique, d_record.ncols()));
        for (i, &r) in self.row_of.iter().enumerate() {
            d.row_mut(r).scaled_add(1.0, &d_record.row(i));
        }
        encoder.backward_encode(&self.trace, None, d.view(), Some(grad), None);
    }
}

/// Pooled vectors for the distinct items of `records`, one row per record.
fn eval_pooled(encoder: &Encoder, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Array2<f64>> {
    let mut items: Vec<usize> = records.iter().map(|r| r.item).collect();
    items.sort_unstable();
    items.dedup();
    let mut by_item = BTreeMap::new();
    for chunk in items.chunks(EVAL_CHUNK) {
        let (pooled, _) = encoder.encode_batch(&tokens.batch(chunk.iter().copied()), None)?;
        for (k, &item) in chunk.iter().enumerate() {
            by_item.insert(item, pooled.row(k).to_owned());
        }
    }
    let mut out = Array2::zeros((records.len(), encoder.config.hidden_dim));
    for (i, r) in records.iter().enumerate() {
        out.row_mut(i).assign(&by_item[&r.item]);
    }
    Ok(out)
}

/// Dropout, head and cross-entropy; returns the loss and `dL/dcombined`.
pub(crate) fn head_step(
    head: &ClassifierHead,
    mut combined: Array2<f64>,
    labels: &[usize],
    ctx: StepContext,
    grad: &mut ClassifierHead,
) -> (f64, Array2<f64>) {
    let mask = ctx.mask(combined.nrows(), combined.ncols(), 0);
    if let Some(m) = &mask {
        combined *= m;
    }
    let (logits, trace) = head.forward(combined.view());
    let (loss, dlogits) = batch_cross_entropy(&logits, labels, labels.len());
    let mut d = head.backward(&trace, dlogits.view(), Some(grad));
    if let Some(m) = &mask {
        d *= m;
    }
    (loss, d)
}

fn labels_of(batch: &[DenseRecord]) -> Vec<usize> {
    batch.iter().map(|r| r.label).collect()
}

fn check_batch(batch: &[DenseRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(())
}

/// Encoder fine-tuned on item-level majority labels.
pub struct SingleTaskModel {
    pub encoder: Encoder,
    adam: Adam,
}

impl SingleTaskModel {
    pub fn new(mut encoder: Encoder, lr: f64) -> Self {
        encoder.frozen = Default::default();
        Self {
            encoder,
            adam: Adam::new(lr, AdamSettings::default()),
        }
    }

    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }

    pub fn predict_item(&self, tokens: &[usize]) -> Result<usize> {
        Ok(crate::nn::argmax(self.encoder.forward(tokens, None)?.logits.view()))
    }
}

/// One example per item carrying the plurality label of its training votes.
pub fn majority_examples(corpus: &PerspectivistCorpus, train: &[usize]) -> Vec<DenseRecord> {
    let votes = corpus.votes(Some(train));
    votes
        .iter()
        .enumerate()
        .filter_map(|(item, v)| {
            majority_label(v, corpus.num_classes()).map(|label| DenseRecord {
                item,
                annotator: 0,
                label,
            })
        })
        .collect()
}

impl PerspectiveModel for SingleTaskModel {
    fn kind(&self) -> SystemKind {
        SystemKind::SingleTask
    }

    fn examples(&self, corpus: &PerspectivistCorpus, train: &[usize]) -> Vec<DenseRecord> {
        majority_examples(corpus, train)
    }

    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
        check_batch(batch)?;
        let pass = EncodePass::new(&self.encoder, batch, tokens)?;
        let mut head_grad = self.encoder.head.zeros_like();
        let mut body_grad = self.encoder.body.zeros_like();
        let (loss, d) = head_step(&self.encoder.head, pass.record_pooled(), &labels_of(batch), ctx, &mut head_grad);
        pass.backward(&self.encoder, &d, &mut body_grad);
        self.adam.step_parts(
            &mut [&mut self.encoder.body, &mut self.encoder.head],
            &[&body_grad, &head_grad],
        );
        Ok(loss)
    }

    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
        let pooled = eval_pooled(&self.encoder, records, tokens)?;
        Ok(argmax_rows(&self.encoder.head.forward(pooled.view()).0))
    }

    fn trainable(&self) -> ParamBreakdown {
        encoder_breakdown(&self.encoder)
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    fn to_checkpoint(&self) -> Checkpoint {
        self.encoder.to_checkpoint()
    }
}

fn encoder_breakdown(encoder: &Encoder) -> ParamBreakdown {
    let body = &encoder.body;
    let embeddings = body.tok_emb.len() + body.pos_emb.len();
    let blocks: usize = body.blocks.iter().map(|b| b.num_params()).sum::<usize>() + body.final_ln.num_params();
    ParamBreakdown {
        components: vec![
            ("encoder_embeddings".into(), embeddings as u64),
            ("encoder_body".into(), blocks as u64),
            ("classifier_head".into(), encoder.head.num_params() as u64),
        ],
    }
}

fn embedding_table(rows: usize, d: usize, std: f64, seed: u64, tag: u64) -> Array2<f64> {
    normal_matrix(rows, d, std, &mut rng_for(seed, &[tag]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AartSettings {
    pub lambda_reg: f64,
    pub lambda_con: f64,
    pub temperature: f64,
    /// Annotator pairs agreeing on more than this share of shared training
    /// items are contrastive positives.
    pub agreement_threshold: f64,
}

impl Default for AartSettings {
    fn default() -> Self {
        Self {
            lambda_reg: 0.1,
            lambda_con: 0.1,
            temperature: 0.1,
            agreement_threshold: 0.8,
        }
    }
}

impl AartSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::config("lambda_reg", "must be >= 0"));
        }
        if !(self.lambda_con >= 0.0) {
            return Err(Error::config("lambda_con", "must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// `positive[a][b]`: a and b agree on more than the threshold share of the
/// items both labelled.
pub fn agreement_positives(
    corpus: &PerspectivistCorpus,
    records: &[usize],
    threshold: f64,
) -> Vec<Vec<bool>> {
    let n = corpus.num_annotators();
    let mut by_item: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &r in records {
        let rec = corpus.dense()[r];
        by_item.entry(rec.item).or_default().push((rec.annotator, rec.label));
    }
    let mut agree = vec![vec![0usize; n]; n];
    let mut shared = vec![vec![0usize; n]; n];
    for votes in by_item.values() {
        for (x, &(a, la)) in votes.iter().enumerate() {
            for &(b, lb) in &votes[x + 1..] {
                shared[a][b] += 1;
                shared[b][a] += 1;
                if la == lb {
                    agree[a][b] += 1;
                    agree[b][a] += 1;
                }
            }
        }
    }
    (0..n)
        .map(|a| {
            (0..n)
                .map(|b| a != b && shared[a][b] > 0 && agree[a][b] as f64 / shared[a][b] as f64 > threshold)
                .collect()
        })
        .collect()
}

/// Normalised-temperature contrastive loss over the distinct annotators of a
/// batch, and its gradient with respect to their embedding rows.
pub fn contrastive_loss(
    emb: &Array2<f64>,
    annotators: &[usize],
    positives: &[Vec<bool>],
    temperature: f64,
) -> (f64, BTreeMap<usize, Array1<f64>>) {
    let mut ids: Vec<usize> = annotators.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut grads: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    if ids.len() < 2 {
        return (0.0, grads);
    }
    let norms: Vec<f64> = ids.iter().map(|&a| emb.row(a).dot(&emb.row(a)).sqrt().max(1e-12)).collect();
    let unit: Vec<Array1<f64>> = ids
        .iter()
        .zip(&norms)
        .map(|(&a, &n)| emb.row(a).to_owned() / n)
        .collect();
    let m = ids.len();
    let mut du: Vec<Array1<f64>> = vec![Array1::zeros(emb.ncols()); m];
    let mut total = 0.0;
    let mut anchors = 0usize;
    for x in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&y| positives[ids[x]][ids[y]]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let sims: Vec<f64> = (0..m).map(|y| unit[x].dot(&unit[y]) / temperature).collect();
        let max = (0..m).filter(|&y| y != x).map(|y| sims[y]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&y| y != x).map(|y| (sims[y] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let share = 1.0 / pos.len() as f64;
        total += pos.iter().map(|&p| log_denom - sims[p]).sum::<f64>() * share;
        for y in (0..m).filter(|&y| y != x) {
            let soft = (sims[y] - log_denom).exp();
            let target = if positives[ids[x]][ids[y]] { share } else { 0.0 };
            let ds = (soft - target) / temperature;
            let (ux, uy) = (unit[x].clone(), unit[y].clone());
            du[x].scaled_add(ds, &uy);
            du[y].scaled_add(ds, &ux);
        }
    }
    if anchors == 0 {
        return (0.0, grads);
    }
    let k = 1.0 / anchors as f64;
    for (x, &a) in ids.iter().enumerate() {
        let u = &unit[x];
        let g = &du[x] * k;
        // through the normalisation: (g - u (u.g)) / |f|
        let proj = u * u.dot(&g);
        grads.insert(a, (g - proj) / norms[x]);
    }
    (total * k, grads)
}

/// `head(e(x) + f(a))` with a fully trainable encoder.
pub struct AartModel {
    pub encoder: Encoder,
    /// `f`: `[num_annotators, d]`
    pub emb: Array2<f64>,
    pub settings: AartSettings,
    positives: Vec<Vec<bool>>,
    adam: Adam,
}

struct AartGrad {
    emb: Array2<f64>,
}

impl ParamSet for AartGrad {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("emb", self.emb.shape(), self.emb.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.emb.shape().to_vec();
        f("emb", &shape, self.emb.as_slice_mut().expect("contiguous"));
    }
}

const AART_STREAM: u64 = 0x4141_5254;
const AE_STREAM: u64 = 0x4145;

impl AartModel {
    pub fn new(
        mut encoder: Encoder,
        corpus: &PerspectivistCorpus,
        train: &[usize],
        settings: AartSettings,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        encoder.frozen = Default::default();
        let d = encoder.config.hidden_dim;
        let positives = agreement_positives(corpus, train, settings.agreement_threshold);
        Ok(Self {
            emb: embedding_table(corpus.num_annotators(), d, 0.02, seed, AART_STREAM),
            encoder,
            settings,
            positives,
            adam: Adam::new(lr, AdamSettings::default()),
        })
    }

    pub fn logits(&self, tokens: &[usize], annotator: usize) -> Result<Array1<f64>> {
        self.check(annotator)?;
        let pooled = self.encoder.forward(tokens, None)?.pooled;
        Ok(self.encoder.head.logits((pooled + self.emb.row(annotator)).view()))
    }

    fn check(&self, annotator: usize) -> Result<()> {
        if annotator >= self.emb.nrows() {
            return Err(Error::contract(format!(
                "annotator index {annotator} out of range ({} annotators)",
                self.emb.nrows()
            )));
        }
        Ok(())
    }

    fn combine(&self, pooled: &mut Array2<f64>, batch: &[DenseRecord]) {
        for (mut row, r) in pooled.rows_mut().into_iter().zip(batch) {
            row += &self.emb.row(r.annotator);
        }
    }

    fn regulariser(&self, batch: &[DenseRecord]) -> (f64, Vec<(usize, Array1<f64>)>) {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for r in batch {
            let row = self.emb.row(r.annotator);
            loss += row.dot(&row) / n;
            grads.push((r.annotator, row.to_owned() * (2.0 / n)));
        }
        (loss, grads)
    }

    /// `CE + lambda_reg * mean |f(a)|^2 + lambda_con * contrastive` with
    /// gradients for every trainable tensor.
    fn loss_and_grads(
        &self,
        batch: &[DenseRecord],
        tokens: &TokenizedCorpus,
        ctx: StepContext,
    ) -> Result<(f64, EncoderBody, ClassifierHead, AartGrad)> {
        check_batch(batch)?;
        batch.iter().try_for_each(|r| self.check(r.annotator))?;
        let pass = EncodePass::new(&self.encoder, batch, tokens)?;
        let mut combined = pass.record_pooled();
        self.combine(&mut combined, batch);
        let mut head_grad = self.encoder.head.zeros_like();
        let (ce, d) = head_step(&self.encoder.head, combined, &labels_of(batch), ctx, &mut head_grad);
        let mut grad = AartGrad {
            emb: Array2::zeros(self.emb.raw_dim()),
        };
        for (row, r) in d.rows().into_iter().zip(batch) {
            grad.emb.row_mut(r.annotator).scaled_add(1.0, &row);
        }
        let s = &self.settings;
        let (reg, reg_grads) = self.regulariser(batch);
        for (a, g) in reg_grads {
            grad.emb.row_mut(a).scaled_add(s.lambda_reg, &g);
        }
        let annotators: Vec<usize> = batch.iter().map(|r| r.annotator).collect();
        let (con, con_grads) = contrastive_loss(&self.emb, &annotators, &self.positives, s.temperature);
        for (a, g) in con_grads {
            grad.emb.row_mut(a).scaled_add(s.lambda_con, &g);
        }
        let mut body_grad = self.encoder.body.zeros_like();
        pass.backward(&self.encoder, &d, &mut body_grad);
        Ok((ce + s.lambda_reg * reg + s.lambda_con * con, body_grad, head_grad, grad))
    }

    /// Training loss of `batch` without dropout.
    pub fn loss(&self, batch: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<f64> {
        let ctx = StepContext {
            seed: 0,
            step: 0,
            dropout_p: 0.0,
        };
        Ok(self.loss_and_grads(batch, tokens, ctx)?.0)
    }
}

impl PerspectiveModel for AartModel {
    fn kind(&self) -> SystemKind {
        SystemKind::Aart
    }

    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
        let (loss, body, head, emb) = self.loss_and_grads(batch, tokens, ctx)?;
        let mut table = AartGrad {
            emb: std::mem::take(&mut self.emb),
        };
        self.adam.step_parts(
            &mut [&mut self.encoder.body, &mut self.encoder.head, &mut table],
            &[&body, &head, &emb],
        );
        self.emb = table.emb;
        Ok(loss)
    }

    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
        records.iter().try_for_each(|r| self.check(r.annotator))?;
        let mut combined = eval_pooled(&self.encoder, records, tokens)?;
        self.combine(&mut combined, records);
        Ok(argmax_rows(&self.encoder.head.forward(combined.view()).0))
    }

    fn trainable(&self) -> ParamBreakdown {
        let mut b = encoder_breakdown(&self.encoder);
        b.components.push(("annotator_embeddings".into(), self.emb.len() as u64));
        b
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint();
        ck.kind = "aart".into();
        ck.set_meta("settings", serde_json::to_string(&self.settings).expect("plain data"));
        ck.push_params("aart", &AartGrad { emb: self.emb.clone() }, false);
        ck
    }
}

/// Annotator and annotation embeddings plus the two scalar gates.
#[derive(Clone, Debug, PartialEq)]
pub struct AeParams {
    /// `E_a`: `[num_annotators, d]`
    pub ann: Array2<f64>,
    /// `E_n`: `[num_annotators, d]`
    pub annot: Array2<f64>,
    pub w_a: Array1<f64>,
    pub w_n: Array1<f64>,
    /// `[b_a, b_n]`
    pub gate_bias: Array1<f64>,
}

impl AeParams {
    fn zeros_like(&self) -> Self {
        Self {
            ann: Array2::zeros(self.ann.raw_dim()),
            annot: Array2::zeros(self.annot.raw_dim()),
            w_a: Array1::zeros(self.w_a.len()),
            w_n: Array1::zeros(self.w_n.len()),
            gate_bias: Array1::zeros(2),
        }
    }

    /// Zeroes both gates so the model reduces to its encoder.
    pub fn zero_gates(&mut self) {
        self.w_a.fill(0.0);
        self.w_n.fill(0.0);
        self.gate_bias.fill(0.0);
    }

    fn gates(&self, pooled: ArrayView1<f64>, a: usize) -> (f64, f64) {
        let alpha_n = (&pooled * &self.annot.row(a)).dot(&self.w_n) + self.gate_bias[1];
        let alpha_a = (&pooled * &self.ann.row(a)).dot(&self.w_a) + self.gate_bias[0];
        (alpha_n, alpha_a)
    }
}

impl ParamSet for AeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("ann", self.ann.shape(), self.ann.as_slice().expect("contiguous"));
        f("annot", self.annot.shape(), self.annot.as_slice().expect("contiguous"));
        f("w_a", self.w_a.shape(), self.w_a.as_slice().expect("contiguous"));
        f("w_n", self.w_n.shape(), self.w_n.as_slice().expect("contiguous"));
        f("gate_bias", self.gate_bias.shape(), self.gate_bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let s = self.ann.shape().to_vec();
        f("ann", &s, self.ann.as_slice_mut().expect("contiguous"));
        let s = self.annot.shape().to_vec();
        f("annot", &s, self.annot.as_slice_mut().expect("contiguous"));
        let s = self.w_a.shape().to_vec();
        f("w_a", &s, self.w_a.as_slice_mut().expect("contiguous"));
        let s = self.w_n.shape().to_vec();
        f("w_n", &s, self.w_n.as_slice_mut().expect("contiguous"));
        f("gate_bias", &[2], self.gate_bias.as_slice_mut().expect("contiguous"));
    }
}

/// `head(pooled + alpha_n E_n[a] + alpha_a E_a[a])` with scalar gates
/// `alpha = w . (pooled * E[a]) + b`.
pub struct AeModel {
    pub encoder: Encoder,
    pub params: AeParams,
    adam: Adam,
}

impl AeModel {
    pub fn new(mut encoder: Encoder, num_annotators: usize, lr: f64, seed: u64) -> Self {
        encoder.frozen = Default::default();
        let d = encoder.config.hidden_dim;
        let params = AeParams {
            ann: embedding_table(num_annotators, d, 0.1, seed, AE_STREAM),
            annot: embedding_table(num_annotators, d, 0.1, seed, AE_STREAM + 1),
            w_a: embedding_table(1, d, 0.1, seed, AE_STREAM + 2).row(0).to_owned(),
            w_n: embedding_table(1, d, 0.1, seed, AE_STREAM + 3).row(0).to_owned(),
            gate_bias: Array1::zeros(2),
        };
        Self {
            encoder,
            params,
            adam: Adam::new(lr, AdamSettings::default()),
        }
    }

    fn check(&self, annotator: usize) -> Result<()> {
        if annotator >= self.params.ann.nrows() {
            return Err(Error::contract(format!(
                "annotator index {annotator} out of range ({} annotators)",
                self.params.ann.nrows()
            )));
        }
        Ok(())
    }

    fn combine(&self, pooled: &Array2<f64>, batch: &[DenseRecord]) -> Array2<f64> {
        let mut out = pooled.clone();
        for ((mut row, p), r) in out.rows_mut().into_iter().zip(pooled.rows()).zip(batch) {
            let (alpha_n, alpha_a) = self.params.gates(p, r.annotator);
            row.scaled_add(alpha_n, &self.params.annot.row(r.annotator));
            row.scaled_add(alpha_a, &self.params.ann.row(r.annotator));
        }
        out
    }

    pub fn logits(&self, tokens: &[usize], annotator: usize) -> Result<Array1<f64>> {
        self.check(annotator)?;
        let pooled = self.encoder.forward(tokens, None)?.pooled.insert_axis(ndarray::Axis(0));
        let rec = [DenseRecord { item: 0, annotator, label: 0 }];
        Ok(self.encoder.head.logits(self.combine(&pooled, &rec).row(0)))
    }

    fn loss_and_grads(
        &self,
        batch: &[DenseRecord],
        tokens: &TokenizedCorpus,
        ctx: StepContext,
    ) -> Result<(f64, EncoderBody, ClassifierHead, AeParams)> {
        check_batch(batch)?;
        batch.iter().try_for_each(|r| self.check(r.annotator))?;
        let pass = EncodePass::new(&self.encoder, batch, tokens)?;
        let pooled = pass.record_pooled();
        let combined = self.combine(&pooled, batch);
        let mut head_grad = self.encoder.head.zeros_like();
        let (loss, dc) = head_step(&self.encoder.head, combined, &labels_of(batch), ctx, &mut head_grad);
        let p = &self.params;
        let mut g = p.zeros_like();
        let mut dpooled = dc.clone();
        for (i, r) in batch.iter().enumerate() {
            let a = r.annotator;
            let (x, dci) = (pooled.row(i), dc.row(i));
            let (alpha_n, alpha_a) = p.gates(x, a);
            let (e_n, e_a) = (p.annot.row(a), p.ann.row(a));
            let g_n = dci.dot(&e_n);
            let g_a = dci.dot(&e_a);
            let mut dp = dpooled.row_mut(i);
            dp.scaled_add(g_n, &(&p.w_n * &e_n));
            dp.scaled_add(g_a, &(&p.w_a * &e_a));
            let mut row = g.annot.row_mut(a);
            row.scaled_add(alpha_n, &dci);
            row.scaled_add(g_n, &(&p.w_n * &x));
            let mut row = g.ann.row_mut(a);
            row.scaled_add(alpha_a, &dci);
            row.scaled_add(g_a, &(&p.w_a * &x));
            g.w_n.scaled_add(g_n, &(&x * &e_n));
            g.w_a.scaled_add(g_a, &(&x * &e_a));
            g.gate_bias[0] += g_a;
            g.gate_bias[1] += g_n;
        }
        let mut body_grad = self.encoder.body.zeros_like();
        pass.backward(&self.encoder, &dpooled, &mut body_grad);
        Ok((loss, body_grad, head_grad, g))
    }
}

impl PerspectiveModel for AeModel {
    fn kind(&self) -> SystemKind {
        SystemKind::Ae
    }

    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
        let (loss, body, head, params) = self.loss_and_grads(batch, tokens, ctx)?;
        self.adam.step_parts(
            &mut [&mut self.encoder.body, &mut self.encoder.head, &mut self.params],
            &[&body, &head, &params],
        );
        Ok(loss)
    }

    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
        records.iter().try_for_each(|r| self.check(r.annotator))?;
        let pooled = eval_pooled(&self.encoder, records, tokens)?;
        let combined = self.combine(&pooled, records);
        Ok(argmax_rows(&self.encoder.head.forward(combined.view()).0))
    }

    fn trainable(&self) -> ParamBreakdown {
        let mut b = encoder_breakdown(&self.encoder);
        let p = &self.params;
        b.components.push(("annotator_embeddings".into(), p.ann.len() as u64));
        b.components.push(("annotation_embeddings".into(), p.annot.len() as u64));
        b.components.push((
            "gates".into(),
            (p.w_a.len() + p.w_n.len() + p.gate_bias.len()) as u64,
        ));
        b
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint();
        ck.kind = "ae".into();
        ck.push_params("ae", &self.params, false);
        ck
    }
}

/// One adapter set and classifier head per annotator over a shared frozen
/// encoder. Every batch updates only the annotators it contains.
pub struct SeparateLoraModel {
    pub encoder: Encoder,
    pub adapters: Vec<AnnotatorAdapter>,
}

impl SeparateLoraModel {
    pub fn new(mut encoder: Encoder, num_annotators: usize, rank: usize, alpha: f64, lr: f64, seed: u64) -> Result<Self> {
        encoder.freeze_all();
        let adapters = (0..num_annotators)
            .map(|a| AnnotatorAdapter::new(&encoder, rank, alpha, lr, rng_for(seed, &[0x5345_50, a as u64])))
            .collect::<Result<_>>()?;
        Ok(Self { encoder, adapters })
    }
}

impl PerspectiveModel for SeparateLoraModel {
    fn kind(&self) -> SystemKind {
        SystemKind::SeparateLora
    }

    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
        check_batch(batch)?;
        let mut total = 0.0;
        for (a, group) in crate::system::group_by_annotator(batch) {
            let adapter = self
                .adapters
                .get_mut(a)
                .ok_or_else(|| Error::contract(format!("no adapter for annotator index {a}")))?;
            let records: Vec<DenseRecord> = group.iter().map(|(_, r)| *r).collect();
            let ctx = StepContext {
                step: ctx.step.wrapping_mul(1 << 20).wrapping_add(a as u64),
                ..ctx
            };
            total += adapter.train_step(&self.encoder, &records, tokens, ctx)? * records.len() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
        let mut out = vec![0; records.len()];
        for (a, group) in crate::system::group_by_annotator(records) {
            let adapter = self
                .adapters
                .get(a)
                .ok_or_else(|| Error::contract(format!("no adapter for annotator index {a}")))?;
            for chunk in group.chunks(EVAL_CHUNK) {
                let seqs = tokens.batch(chunk.iter().map(|(_, r)| r.item));
                let logits = adapter.logits(&self.encoder, &seqs)?;
                for ((pos, _), label) in chunk.iter().zip(argmax_rows(&logits)) {
                    out[*pos] = label;
                }
            }
        }
        Ok(out)
    }

    fn trainable(&self) -> ParamBreakdown {
        let (lora, head) = self.adapters.first().map_or((0, 0), |a| {
            (a.adapters.num_params() as u64, a.head.num_params() as u64)
        });
        let n = self.adapters.len() as u64;
        ParamBreakdown {
            components: vec![("adapters".into(), n * lora), ("classifier_heads".into(), n * head)],
        }
    }

    fn frozen_checksum(&self) -> Option<String> {
        Some(self.encoder.checksum())
    }

    fn set_learning_rate(&mut self, lr: f64) {
        for a in &mut self.adapters {
            a.adam.lr = lr;
        }
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.encoder.to_checkpoint();
        ck.kind = "separate_lora".into();
        for (i, a) in self.adapters.iter().enumerate() {
            ck.push_params(&format!("annotator.{i}.lora"), &a.adapters, false);
            ck.push_params(&format!("annotator.{i}.head"), &a.head, false);
        }
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::nn::uniform_matrix;

    fn tiny_encoder(seed: u64) -> Encoder {
        Encoder::new(EncoderConfig {
            vocab_size: 30,
            hidden_dim: 6,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            max_seq_len: 12,
            num_classes: 2,
            seed,
        })
        .unwrap()
    }

    fn toy_corpus() -> PerspectivistCorpus {
        use crate::corpus::{AnnotationRecord, TextItem};
        let items = (0..4)
            .map(|i| TextItem {
                item_id: format!("i{i}"),
                text: format!("w{i} x{i} y"),
            })
            .collect();
        let mut records = Vec::new();
        for i in 0..4 {
            for a in 0..3 {
                records.push(AnnotationRecord {
                    item_id: format!("i{i}"),
                    annotator_id: format!("a{a}"),
                    label: if a == 2 { i % 2 } else { (i + 1) % 2 },
                });
            }
        }
        PerspectivistCorpus::new(items, records, 2).unwrap()
    }

    fn toy_tokens() -> TokenizedCorpus {
        TokenizedCorpus::from_seqs(vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9], vec![10]])
    }

    fn batch() -> Vec<DenseRecord> {
        vec![
            DenseRecord { item: 0, annotator: 0, label: 1 },
            DenseRecord { item: 1, annotator: 1, label: 0 },
            DenseRecord { item: 0, annotator: 2, label: 0 },
            DenseRecord { item: 3, annotator: 1, label: 1 },
        ]
    }

    #[test]
    fn single_task_predicts_the_same_label_for_every_annotator() {
        let m = SingleTaskModel::new(tiny_encoder(1), 1e-3);
        let recs = [
            DenseRecord { item: 2, annotator: 0, label: 0 },
            DenseRecord { item: 2, annotator: 1, label: 1 },
        ];
        let p = m.predict(&recs, &toy_tokens()).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn majority_examples_use_lowest_class_on_ties() {
        let corpus = toy_corpus();
        let all: Vec<usize> = (0..corpus.dense().len()).collect();
        let ex = majority_examples(&corpus, &all);
        assert_eq!(ex.len(), 4);
        assert_eq!(ex.iter().map(|e| e.label).collect::<Vec<_>>(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn zero_aart_embeddings_reduce_to_the_encoder() {
        let corpus = toy_corpus();
        let mut m = AartModel::new(tiny_encoder(2), &corpus, &[0, 1, 2], AartSettings::default(), 1e-3, 1).unwrap();
        let tokens = [3, 1, 4];
        let base = m.encoder.forward(&tokens, None).unwrap().logits;
        assert_ne!(m.logits(&tokens, 1).unwrap(), base);
        m.emb.fill(0.0);
        assert_eq!(m.logits(&tokens, 1).unwrap(), base);
    }

    #[test]
    fn aart_rows_are_isolated() {
        let corpus = toy_corpus();
        let mut m = AartModel::new(tiny_encoder(2), &corpus, &[], AartSettings::default(), 1e-3, 1).unwrap();
        let before = m.logits(&[5, 6], 0).unwrap();
        m.emb.row_mut(1).fill(3.0);
        assert_eq!(before, m.logits(&[5, 6], 0).unwrap());
    }

    #[test]
    fn aart_loss_reduces_to_cross_entropy_and_ignores_duplication() {
        let corpus = toy_corpus();
        let all: Vec<usize> = (0..corpus.dense().len()).collect();
        let tokens = toy_tokens();
        let plain = AartSettings { lambda_reg: 0.0, lambda_con: 0.0, ..AartSettings::default() };
        let m = AartModel::new(tiny_encoder(3), &corpus, &all, plain, 1e-3, 2).unwrap();
        let b = batch();
        let mut ce = 0.0;
        for r in &b {
            let logits = m.logits(tokens.get(r.item), r.annotator).unwrap();
            ce += crate::nn::cross_entropy(logits.view(), r.label).0 / b.len() as f64;
        }
        assert!((m.loss(&b, &tokens).unwrap() - ce).abs() < 1e-12);

        let full = AartModel::new(tiny_encoder(3), &corpus, &all, AartSettings::default(), 1e-3, 2).unwrap();
        let doubled: Vec<DenseRecord> = b.iter().chain(b.iter()).copied().collect();
        let (x, y) = (full.loss(&b, &tokens).unwrap(), full.loss(&doubled, &tokens).unwrap());
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn contrastive_term_vanishes_without_pairs() {
        let emb = uniform_matrix(3, 4, 1.0, &mut rng_for(1, &[]));
        let pos = vec![vec![false, true, true], vec![true, false, true], vec![true, true, false]];
        assert_eq!(contrastive_loss(&emb, &[1, 1, 1], &pos, 0.1).0, 0.0);
        assert_eq!(contrastive_loss(&emb, &[0, 1], &pos, 0.1).0, 0.0);
        assert!(contrastive_loss(&emb, &[0, 1, 2], &pos, 0.1).0 > 0.0);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let emb = uniform_matrix(4, 3, 1.0, &mut rng_for(4, &[]));
        let mut pos = vec![vec![false; 4]; 4];
        pos[0][2] = true;
        pos[2][0] = true;
        pos[1][3] = true;
        pos[3][1] = true;
        let ids = [0, 1, 2, 3, 2];
        let (_, grads) = contrastive_loss(&emb, &ids, &pos, 0.5);
        let h = 1e-6;
        for (&a, g) in &grads {
            for k in 0..3 {
                let mut up = emb.clone();
                up[[a, k]] += h;
                let mut down = emb.clone();
                down[[a, k]] -= h;
                let fd = (contrastive_loss(&up, &ids, &pos, 0.5).0 - contrastive_loss(&down, &ids, &pos, 0.5).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "row {a} col {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn agreement_positives_follow_threshold() {
        let corpus = toy_corpus();
        let all: Vec<usize> = (0..corpus.dense().len()).collect();
        let pos = agreement_positives(&corpus, &all, 0.8);
        assert!(pos[0][1] && pos[1][0]);
        assert!(!pos[0][2] && !pos[2][1]);
        assert!(!pos[0][0]);
    }

    #[test]
    fn zero_ae_gates_reduce_to_the_encoder() {
        let mut m = AeModel::new(tiny_encoder(5), 3, 1e-3, 4);
        let tokens = [7, 8, 9];
        let base = m.encoder.forward(&tokens, None).unwrap().logits;
        assert_ne!(m.logits(&tokens, 2).unwrap(), base);
        m.params.zero_gates();
        assert_eq!(m.logits(&tokens, 2).unwrap(), base);
        assert_eq!(m.logits(&tokens, 2).unwrap(), m.logits(&tokens, 2).unwrap());
    }

    fn check_fd(loss: &dyn Fn(&dyn Fn(&mut dyn ParamSet)) -> f64, analytic: &[f64], set_len: usize) {
        let h = 1e-5;
        for i in 0..set_len {
            let bump = |delta: f64| {
                move |p: &mut dyn ParamSet| {
                    let mut k = 0;
                    p.visit_mut(&mut |_, _, d| {
                        for x in d.iter_mut() {
                            if k == i {
                                *x += delta;
                            }
                            k += 1;
                        }
                    });
                }
            };
            let fd = (loss(&bump(h)) - loss(&bump(-h))) / (2.0 * h);
            let a = analytic[i];
            assert!((fd - a).abs() <= 1e-6 + 1e-5 * a.abs().max(fd.abs()), "param {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn ae_gradients_match_finite_differences() {
        let m = AeModel::new(tiny_encoder(6), 3, 1e-3, 5);
        let tokens = toy_tokens();
        let ctx = StepContext { seed: 0, step: 0, dropout_p: 0.0 };
        let (_, body, head, params) = m.loss_and_grads(&batch(), &tokens, ctx).unwrap();
        let run = |edit: &dyn Fn(&mut AeModel)| {
            let mut c = AeModel { encoder: m.encoder.clone(), params: m.params.clone(), adam: Adam::new(0.0, AdamSettings::default()) };
            edit(&mut c);
            c.loss_and_grads(&batch(), &tokens, ctx).unwrap().0
        };
        check_fd(&|f| run(&|c| f(&mut c.params)), &params.flatten(), params.num_params());
        check_fd(&|f| run(&|c| f(&mut c.encoder.head)), &head.flatten(), head.num_params());
        check_fd(&|f| run(&|c| f(&mut c.encoder.body)), &body.flatten(), body.num_params());
    }

    #[test]
    fn aart_gradients_match_finite_differences() {
        let corpus = toy_corpus();
        let all: Vec<usize> = (0..corpus.dense().len()).collect();
        let mut m = AartModel::new(tiny_encoder(7), &corpus, &all, AartSettings::default(), 1e-3, 6).unwrap();
        m.emb = uniform_matrix(3, 6, 0.5, &mut rng_for(9, &[]));
        let tokens = toy_tokens();
        let ctx = StepContext { seed: 0, step: 0, dropout_p: 0.0 };
        let (_, body, head, emb) = m.loss_and_grads(&batch(), &tokens, ctx).unwrap();
        let run = |edit: &dyn Fn(&mut AartModel)| {
            let mut c = AartModel {
                encoder: m.encoder.clone(),
                emb: m.emb.clone(),
                settings: m.settings.clone(),
                positives: m.positives.clone(),
                adam: Adam::new(0.0, AdamSettings::default()),
            };
            edit(&mut c);
            c.loss_and_grads(&batch(), &tokens, ctx).unwrap().0
        };
        let emb_len = emb.num_params();
        check_fd(
            &|f| {
                run(&|c| {
                    let mut g = AartGrad { emb: std::mem::take(&mut c.emb) };
                    f(&mut g);
                    c.emb = g.emb;
                })
            },
            &emb.flatten(),
            emb_len,
        );
        check_fd(&|f| run(&|c| f(&mut c.encoder.head)), &head.flatten(), head.num_params());
        check_fd(&|f| run(&|c| f(&mut c.encoder.body)), &body.flatten(), body.num_params());
    }

    #[test]
    fn separate_adapters_touch_only_their_annotator() {
        let mut m = SeparateLoraModel::new(tiny_encoder(8), 3, 2, 32.0, 1e-2, 1).unwrap();
        let frozen = m.frozen_checksum();
        let before: Vec<String> = m.adapters.iter().map(|a| a.head.checksum()).collect();
        let b = [DenseRecord { item: 0, annotator: 1, label: 1 }];
        m.train_batch(&b, &toy_tokens(), StepContext { seed: 0, step: 0, dropout_p: 0.0 }).unwrap();
        let after: Vec<String> = m.adapters.iter().map(|a| a.head.checksum()).collect();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        assert_eq!(frozen, m.frozen_checksum());
    }
}
