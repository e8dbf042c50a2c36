//! Hypernetwork that generates low-rank factors for every
//! (annotator, target projection) pair, and the system that trains it on top
//! of a frozen encoder.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::DenseRecord;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraFactors, Projection, TargetKey};
use crate::metrics::ParamBreakdown;
use crate::nn::{gelu, gelu_grad, normal_matrix, rng_for, uniform_matrix, Linear};
use crate::params::{visit_child, visit_child_mut, Adam, AdamSettings, ParamSet};
use crate::system::{
    argmax_rows, batch_cross_entropy, group_by_annotator, PerspectiveModel, StepContext, SystemKind,
    TokenizedCorpus,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    pub num_annotators: usize,
    pub num_targets: usize,
    pub annotator_embed_dim: usize,
    pub layer_embed_dim: usize,
    /// Input and output width of the adapted projections.
    pub proj_dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub head_init_scale: f64,
    /// Train the encoder's classification head jointly with the hypernetwork.
    pub train_classifier_head: bool,
    pub seed: u64,
}

impl HypernetConfig {
    /// `d_a = d_l = d`, q/v targets of every layer, r=2, alpha=32.
    pub fn for_encoder(encoder: &EncoderConfig, num_annotators: usize, seed: u64) -> Self {
        Self {
            num_annotators,
            num_targets: 2 * encoder.num_layers,
            annotator_embed_dim: encoder.hidden_dim,
            layer_embed_dim: encoder.hidden_dim,
            proj_dim: encoder.hidden_dim,
            rank: 2,
            alpha: 32.0,
            dropout_p: 0.25,
            head_init_scale: 1e-3,
            train_classifier_head: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_targets", self.num_targets),
            ("annotator_embed_dim", self.annotator_embed_dim),
            ("layer_embed_dim", self.layer_embed_dim),
            ("proj_dim", self.proj_dim),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", "must lie in [0, 1)"));
        }
        if !(self.head_init_scale > 0.0) {
            return Err(Error::config("head_init_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.annotator_embed_dim + self.layer_embed_dim
    }
}

/// Target index `j` → (layer `j / 2`, query for even `j`, value for odd).
pub fn target_key(j: usize) -> TargetKey {
    let projection = if j % 2 == 0 {
        Projection::Query
    } else {
        Projection::Value
    };
    TargetKey::new(j / 2, projection)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train(StepContext),
}

const ANN_STREAM: u64 = 0x414e_4e;
const LAYER_STREAM: u64 = 0x4c41_59;
const HEAD_STREAM: u64 = 0x4845_4144;

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetState {
    pub config: HypernetConfig,
    /// `[num_annotators, d_a]`
    pub ann_emb: Array2<f64>,
    /// `[num_targets, d_l]`
    pub layer_emb: Array2<f64>,
    pub lin_a: Linear,
    pub lin_b: Linear,
}

/// What [`HypernetState::generate`] saw, for the backward pass.
#[derive(Clone, Debug)]
pub struct GenTrace {
    annotator: usize,
    target: usize,
    pre: Array1<f64>,
    mask: Option<Array1<f64>>,
    input: Array1<f64>,
}

fn annotator_row(seed: u64, index: usize, dim: usize) -> Array1<f64> {
    let mut rng = rng_for(seed, &[ANN_STREAM, index as u64]);
    normal_matrix(1, dim, 1.0, &mut rng).row(0).to_owned()
}

impl HypernetState {
    pub fn new(config: HypernetConfig) -> Result<Self> {
        config.validate()?;
        let d_a = config.annotator_embed_dim;
        let mut ann_emb = Array2::zeros((config.num_annotators, d_a));
        for i in 0..config.num_annotators {
            ann_emb.row_mut(i).assign(&annotator_row(config.seed, i, d_a));
        }
        let layer_emb = normal_matrix(
            config.num_targets,
            config.layer_embed_dim,
            1.0,
            &mut rng_for(config.seed, &[LAYER_STREAM]),
        );
        let mut rng = rng_for(config.seed, &[HEAD_STREAM]);
        let n_in = config.input_dim();
        let eps = config.head_init_scale;
        let lin_a = Linear {
            weight: uniform_matrix(config.rank * config.proj_dim, n_in, eps, &mut rng),
            bias: uniform_matrix(1, config.rank * config.proj_dim, eps, &mut rng)
                .row(0)
                .to_owned(),
        };
        let lin_b = Linear::zeros(n_in, config.proj_dim * config.rank);
        Ok(Self {
            config,
            ann_emb,
            layer_emb,
            lin_a,
            lin_b,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            ann_emb: Array2::zeros(self.ann_emb.raw_dim()),
            layer_emb: Array2::zeros(self.layer_emb.raw_dim()),
            lin_a: Linear::zeros(self.lin_a.d_in(), self.lin_a.d_out()),
            lin_b: Linear::zeros(self.lin_b.d_in(), self.lin_b.d_out()),
        }
    }

    pub fn num_annotators(&self) -> usize {
        self.ann_emb.nrows()
    }

    pub fn targets(&self) -> Vec<TargetKey> {
        (0..self.config.num_targets).map(target_key).collect()
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.num_annotators() {
            return Err(Error::contract(format!(
                "annotator index {i} out of range ({} annotators)",
                self.num_annotators()
            )));
        }
        if j >= self.config.num_targets {
            return Err(Error::contract(format!(
                "target index {j} out of range ({} targets)",
                self.config.num_targets
            )));
        }
        Ok(())
    }

    pub fn generate(&self, i: usize, j: usize, mode: Mode) -> Result<LoraFactors> {
        Ok(self.generate_traced(i, j, mode)?.0)
    }

    pub fn generate_traced(&self, i: usize, j: usize, mode: Mode) -> Result<(LoraFactors, GenTrace)> {
        self.check(i, j)?;
        let cfg = &self.config;
        let mut pre = Array1::zeros(cfg.input_dim());
        pre.slice_mut(s![..cfg.annotator_embed_dim]).assign(&self.ann_emb.row(i));
        pre.slice_mut(s![cfg.annotator_embed_dim..]).assign(&self.layer_emb.row(j));
        let mut input = pre.mapv(gelu);
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train(ctx) => ctx
                .mask(1, cfg.input_dim(), (i * cfg.num_targets + j) as u64)
                .map(|m| m.row(0).to_owned()),
        };
        if let Some(m) = &mask {
            input *= m;
        }
        let factors = self.factors_from(input.view())?;
        Ok((
            factors,
            GenTrace {
                annotator: i,
                target: j,
                pre,
                mask,
                input,
            },
        ))
    }

    fn factors_from(&self, input: ArrayView1<f64>) -> Result<LoraFactors> {
        let (r, d) = (self.config.rank, self.config.proj_dim);
        let a = self
            .lin_a
            .forward_vec(input)
            .into_shape_with_order((r, d))
            .expect("lin_a output is r*d_in");
        let b = self
            .lin_b
            .forward_vec(input)
            .into_shape_with_order((d, r))
            .expect("lin_b output is d_out*r");
        LoraFactors::new(a, b, self.config.alpha)
    }

    /// Factors for every target, keyed by (layer, projection).
    pub fn assemble_overlays(&self, i: usize, mode: Mode) -> Result<AdapterSet> {
        Ok(self.assemble_traced(i, mode)?.0)
    }

    pub fn assemble_traced(&self, i: usize, mode: Mode) -> Result<(AdapterSet, Vec<GenTrace>)> {
        let mut set = AdapterSet::new();
        let mut traces = Vec::with_capacity(self.config.num_targets);
        for j in 0..self.config.num_targets {
            let (f, t) = self.generate_traced(i, j, mode)?;
            set.insert(target_key(j), f)?;
            traces.push(t);
        }
        Ok((set, traces))
    }

    /// Accumulates into `grad` the gradient implied by factor gradients
    /// `adapter_grad` for the overlays described by `traces`.
    pub fn backward(&self, traces: &[GenTrace], adapter_grad: &AdapterSet, grad: &mut HypernetState) {
        let d_a = self.config.annotator_embed_dim;
        for t in traces {
            let Some(g) = adapter_grad.get(&target_key(t.target)) else {
                continue;
            };
            let da = g.a.view().into_shape_with_order(g.a.len()).expect("standard layout");
            let db = g.b.view().into_shape_with_order(g.b.len()).expect("standard layout");
            let mut dinput = self.lin_a.backward_vec(t.input.view(), da, Some(&mut grad.lin_a));
            dinput += &self.lin_b.backward_vec(t.input.view(), db, Some(&mut grad.lin_b));
            if let Some(m) = &t.mask {
                dinput *= m;
            }
            let dpre = dinput * t.pre.mapv(gelu_grad);
            grad.ann_emb
                .row_mut(t.annotator)
                .scaled_add(1.0, &dpre.slice(s![..d_a]));
            grad.layer_emb
                .row_mut(t.target)
                .scaled_add(1.0, &dpre.slice(s![d_a..]));
        }
    }

    /// Appends one annotator row, drawn exactly as the originals were.
    /// Returns the new annotator's index.
    pub fn add_annotator(&mut self) -> usize {
        let i = self.num_annotators();
        let row = annotator_row(self.config.seed, i, self.config.annotator_embed_dim);
        self.ann_emb.push_row(row.view()).expect("row width is d_a");
        self.config.num_annotators += 1;
        i
    }

    pub fn breakdown(&self) -> Vec<(String, u64)> {
        vec![
            ("annotator_embeddings".into(), self.ann_emb.len() as u64),
            ("target_embeddings".into(), self.layer_emb.len() as u64),
            ("lin_a".into(), self.lin_a.num_params() as u64),
            ("lin_b".into(), self.lin_b.num_params() as u64),
        ]
    }

    pub fn to_checkpoint(&self, registry: &[String]) -> Checkpoint {
        let mut ck = Checkpoint::new("hypernet");
        ck.set_meta("config", serde_json::to_string(&self.config).expect("plain data"));
        ck.set_meta("registry", serde_json::to_string(registry).expect("plain data"));
        ck.push_params("", self, false);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<String>)> {
        if ck.kind != "hypernet" {
            return Err(Error::Checkpoint(format!("expected a hypernet checkpoint, found `{}`", ck.kind)));
        }
        let config: HypernetConfig =
            serde_json::from_str(ck.meta("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let registry: Vec<String> =
            serde_json::from_str(ck.meta("registry")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut state = HypernetState::new(config)?;
        ck.load_params("", &mut state)?;
        Ok((state, registry))
    }
}

impl ParamSet for HypernetState {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("ann_emb", self.ann_emb.shape(), self.ann_emb.as_slice().expect("contiguous"));
        f("layer_emb", self.layer_emb.shape(), self.layer_emb.as_slice().expect("contiguous"));
        visit_child("lin_a", &self.lin_a, f);
        visit_child("lin_b", &self.lin_b, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.ann_emb.shape().to_vec();
        f("ann_emb", &shape, self.ann_emb.as_slice_mut().expect("contiguous"));
        let shape = self.layer_emb.shape().to_vec();
        f("layer_emb", &shape, self.layer_emb.as_slice_mut().expect("contiguous"));
        visit_child_mut("lin_a", &mut self.lin_a, f);
        visit_child_mut("lin_b", &mut self.lin_b, f);
    }
}

/// Frozen encoder + hypernetwork (+ optionally trainable classifier head).
pub struct HypernetModel {
    pub encoder: Encoder,
    pub hyper: HypernetState,
    registry: Vec<String>,
    adam: Adam,
}

/// Eval-mode forward batches are chunked to bound activation memory.
const EVAL_CHUNK: usize = 256;

impl HypernetModel {
    /// Freezes the encoder body (and the head unless the config trains it).
    pub fn new(mut encoder: Encoder, hyper: HypernetState, registry: Vec<String>, lr: f64) -> Result<Self> {
        let cfg = &hyper.config;
        if cfg.proj_dim != encoder.config.hidden_dim || cfg.num_targets > 2 * encoder.config.num_layers {
            return Err(Error::contract(format!(
                "hypernet generates {} targets of width {}, encoder has {} targets of width {}",
                cfg.num_targets,
                cfg.proj_dim,
                2 * encoder.config.num_layers,
                encoder.config.hidden_dim
            )));
        }
        if registry.len() != hyper.num_annotators() {
            return Err(Error::contract(format!(
                "registry lists {} annotators, hypernet has {}",
                registry.len(),
                hyper.num_annotators()
            )));
        }
        encoder.freeze_all();
        encoder.frozen.head = !cfg.train_classifier_head;
        Ok(Self {
            encoder,
            hyper,
            registry,
            adam: Adam::new(lr, AdamSettings::default()),
        })
    }

    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn add_annotator(&mut self, id: &str) -> usize {
        self.registry.push(id.to_string());
        // annotator embeddings lead the flat layout
        let at = self.hyper.ann_emb.len();
        let i = self.hyper.add_annotator();
        self.adam.insert_zeros(at, self.hyper.config.annotator_embed_dim);
        i
    }

    /// Mean cross-entropy over `batch` with gradients for the hypernetwork
    /// and, when it is trainable, the classifier head. Overlays are assembled
    /// once per annotator present in the batch.
    pub fn loss_and_grads(
        &self,
        batch: &[DenseRecord],
        tokens: &TokenizedCorpus,
        ctx: StepContext,
    ) -> Result<(f64, HypernetState, Option<crate::encoder::ClassifierHead>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut hgrad = self.hyper.zeros_like();
        let mut head_grad = (!self.encoder.frozen.head).then(|| self.encoder.head.zeros_like());
        let targets = self.hyper.targets();
        let cfg = &self.hyper.config;
        let mut total = 0.0;
        for (annotator, group) in group_by_annotator(batch) {
            let (overlays, traces) = self.hyper.assemble_traced(annotator, Mode::Train(ctx))?;
            let seqs = tokens.batch(group.iter().map(|(_, r)| r.item));
            let labels: Vec<usize> = group.iter().map(|(_, r)| r.label).collect();
            let (pooled, trace) = self.encoder.encode_batch(&seqs, Some(&overlays))?;
            let (logits, htrace) = self.encoder.head.forward(pooled.view());
            let (loss, dlogits) = batch_cross_entropy(&logits, &labels, batch.len());
            total += loss;
            let dpooled = self
                .encoder
                .head
                .backward(&htrace, dlogits.view(), head_grad.as_mut());
            let mut agrad = AdapterSet::zeros(&targets, cfg.rank, cfg.proj_dim, cfg.alpha);
            self.encoder
                .backward_encode(&trace, Some(&overlays), dpooled.view(), None, Some(&mut agrad));
            self.hyper.backward(&traces, &agrad, &mut hgrad);
        }
        Ok((total, hgrad, head_grad))
    }

    /// Logits for `items` as seen by annotator `i`.
    pub fn logits(&self, i: usize, items: &[&[usize]], mode: Mode) -> Result<Array2<f64>> {
        let overlays = self.hyper.assemble_overlays(i, mode)?;
        self.encoder.logits_batch(items, Some(&overlays))
    }
}

impl PerspectiveModel for HypernetModel {
    fn kind(&self) -> SystemKind {
        SystemKind::Hypernet
    }

    fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
        let (loss, hgrad, head_grad) = self.loss_and_grads(batch, tokens, ctx)?;
        match head_grad {
            Some(g) => self
                .adam
                .step_parts(&mut [&mut self.hyper, &mut self.encoder.head], &[&hgrad, &g]),
            None => self.adam.step(&mut self.hyper, &hgrad),
        }
        Ok(loss)
    }

    fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
        let mut out = vec![0; records.len()];
        for (annotator, group) in group_by_annotator(records) {
            let overlays = self.hyper.assemble_overlays(annotator, Mode::Eval)?;
            for chunk in group.chunks(EVAL_CHUNK) {
                let seqs = tokens.batch(chunk.iter().map(|(_, r)| r.item));
                let logits = self.encoder.logits_batch(&seqs, Some(&overlays))?;
                for ((pos, _), label) in chunk.iter().zip(argmax_rows(&logits)) {
                    out[*pos] = label;
                }
            }
        }
        Ok(out)
    }

    fn trainable(&self) -> ParamBreakdown {
        let mut components = self.hyper.breakdown();
        if !self.encoder.frozen.head {
            components.push(("classifier_head".into(), self.encoder.head.num_params() as u64));
        }
        ParamBreakdown { components }
    }

    fn frozen_checksum(&self) -> Option<String> {
        Some(self.encoder.body.checksum())
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.hyper.to_checkpoint(&self.registry);
        for t in self.encoder.to_checkpoint().tensors {
            ck.tensors.push(crate::checkpoint::TensorEntry {
                name: format!("encoder.{}", t.name),
                ..t
            });
        }
        ck.set_meta("encoder_config", serde_json::to_string(&self.encoder.config).expect("plain data"));
        ck
    }
}

/// Squared Frobenius distance between the factors two annotators receive.
pub fn factor_distance(state: &HypernetState, i: usize, k: usize) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..state.config.num_targets {
        let a = state.generate(i, j, Mode::Eval)?;
        let b = state.generate(k, j, Mode::Eval)?;
        total += (&a.a - &b.a).mapv(|x| x * x).sum() + (&a.b - &b.b).mapv(|x| x * x).sum();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> HypernetConfig {
        HypernetConfig {
            num_annotators: 3,
            num_targets: 2,
            annotator_embed_dim: 8,
            layer_embed_dim: 8,
            proj_dim: 8,
            rank: 1,
            alpha: 2.0,
            dropout_p: 0.25,
            head_init_scale: 1e-3,
            train_classifier_head: true,
            seed: 11,
        }
    }

    #[test]
    fn fresh_state_generates_zero_b_and_small_a() {
        let h = HypernetState::new(micro()).unwrap();
        assert!(h.lin_b.weight.iter().chain(h.lin_b.bias.iter()).all(|&x| x == 0.0));
        assert!(h.lin_a.weight.iter().all(|x| x.abs() <= 1e-3));
        for i in 0..3 {
            for j in 0..2 {
                let f = h.generate(i, j, Mode::Eval).unwrap();
                assert!(f.b.iter().all(|&x| x == 0.0));
                assert_eq!(f.a.dim(), (1, 8));
                assert_eq!(f, h.generate(i, j, Mode::Eval).unwrap());
            }
        }
    }

    #[test]
    fn out_of_range_indices_are_contract_errors() {
        let h = HypernetState::new(micro()).unwrap();
        assert!(matches!(h.generate(3, 0, Mode::Eval), Err(Error::Contract(_))));
        assert!(matches!(h.generate(0, 2, Mode::Eval), Err(Error::Contract(_))));
    }

    #[test]
    fn overlay_sets_cover_every_target() {
        let enc = EncoderConfig::desk(2, 0);
        let h = HypernetState::new(HypernetConfig::for_encoder(&enc, 4, 1)).unwrap();
        let set = h.assemble_overlays(2, Mode::Eval).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.iter().all(|(_, f)| f.b.iter().all(|&x| x == 0.0)));
        let keys: Vec<String> = set.keys().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["layers.0.q", "layers.0.v", "layers.1.q", "layers.1.v"]);

        let roberta = EncoderConfig::roberta(2);
        let cfg = HypernetConfig { proj_dim: 8, ..HypernetConfig::for_encoder(&roberta, 1, 1) };
        let cfg = HypernetConfig { annotator_embed_dim: 4, layer_embed_dim: 4, ..cfg };
        assert_eq!(HypernetState::new(cfg).unwrap().assemble_overlays(0, Mode::Eval).unwrap().len(), 24);
    }

    #[test]
    fn generation_reads_only_its_own_annotator_row() {
        let mut h = HypernetState::new(micro()).unwrap();
        h.lin_b.weight.fill(0.3);
        let before = h.generate(0, 1, Mode::Eval).unwrap();
        h.ann_emb.row_mut(2).fill(9.0);
        h.ann_emb.row_mut(1).fill(-4.0);
        assert_eq!(before, h.generate(0, 1, Mode::Eval).unwrap());
    }

    #[test]
    fn add_annotator_keeps_existing_state_and_grows_by_d_a() {
        let mut h = HypernetState::new(micro()).unwrap();
        h.lin_b.weight.fill(0.1);
        let before: Vec<_> = (0..3).map(|i| h.generate(i, 0, Mode::Eval).unwrap()).collect();
        let n = h.num_params();
        let old = h.clone();
        let idx = h.add_annotator();
        assert_eq!(idx, 3);
        assert_eq!(h.num_params() - n, 8);
        assert_eq!(h.ann_emb.slice(s![..3, ..]), old.ann_emb);
        assert_eq!((h.layer_emb.clone(), h.lin_a.clone(), h.lin_b.clone()), (old.layer_emb, old.lin_a, old.lin_b));
        for (i, f) in before.iter().enumerate() {
            assert_eq!(*f, h.generate(i, 0, Mode::Eval).unwrap());
        }
        // the new row is the one a fresh four-annotator state would draw
        let fresh = HypernetState::new(HypernetConfig { num_annotators: 4, ..micro() }).unwrap();
        assert_eq!(fresh.ann_emb.row(3), h.ann_emb.row(3));
        let zero = HypernetState::new(micro()).unwrap();
        let mut grown = zero.clone();
        let k = grown.add_annotator();
        assert!(grown.generate(k, 1, Mode::Eval).unwrap().b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn train_mode_masks_follow_the_step() {
        let h = HypernetState::new(micro()).unwrap();
        let ctx = StepContext { seed: 1, step: 5, dropout_p: 0.5 };
        let a = h.generate(0, 0, Mode::Train(ctx)).unwrap();
        assert_eq!(a, h.generate(0, 0, Mode::Train(ctx)).unwrap());
        let b = h.generate(0, 0, Mode::Train(StepContext { step: 6, ..ctx })).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut h = HypernetState::new(micro()).unwrap();
        h.lin_b.weight.fill(0.25);
        let reg = vec!["x".to_string(), "y".into(), "z".into()];
        let text = h.to_checkpoint(&reg).to_text();
        let (back, reg2) = HypernetState::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(back, h);
        assert_eq!(reg2, reg);
    }

    fn micro_model() -> (HypernetModel, TokenizedCorpus, Vec<DenseRecord>) {
        let enc = Encoder::new(EncoderConfig {
            vocab_size: 20,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 10,
            num_classes: 2,
            seed: 3,
        })
        .unwrap();
        let mut hyper = HypernetState::new(micro()).unwrap();
        let mut rng = rng_for(77, &[]);
        hyper.lin_b.weight = uniform_matrix(8, 16, 0.05, &mut rng);
        hyper.lin_b.bias.fill(0.01);
        hyper.lin_a.weight = uniform_matrix(8, 16, 0.3, &mut rng);
        let reg = vec!["a".into(), "b".into(), "c".into()];
        let model = HypernetModel::new(enc, hyper, reg, 1e-3).unwrap();
        let tokens = TokenizedCorpus::from_seqs(vec![vec![1, 5, 7], vec![3, 3, 9, 12], vec![19]]);
        let batch = vec![
            DenseRecord { item: 0, annotator: 0, label: 1 },
            DenseRecord { item: 1, annotator: 0, label: 0 },
            DenseRecord { item: 2, annotator: 1, label: 1 },
            DenseRecord { item: 0, annotator: 2, label: 0 },
        ];
        (model, tokens, batch)
    }

    fn perturbed_loss(
        model: &HypernetModel,
        tokens: &TokenizedCorpus,
        batch: &[DenseRecord],
        ctx: StepContext,
        group: usize,
        index: usize,
        delta: f64,
    ) -> f64 {
        let mut m = HypernetModel {
            encoder: model.encoder.clone(),
            hyper: model.hyper.clone(),
            registry: model.registry.clone(),
            adam: Adam::new(0.0, AdamSettings::default()),
        };
        let mut k = 0;
        let mut bump = |_: &str, _: &[usize], d: &mut [f64]| {
            for x in d.iter_mut() {
                if k == index {
                    *x += delta;
                }
                k += 1;
            }
        };
        if group == 0 {
            m.hyper.visit_mut(&mut bump);
        } else {
            m.encoder.head.visit_mut(&mut bump);
        }
        m.loss_and_grads(batch, tokens, ctx).unwrap().0
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let (model, tokens, batch) = micro_model();
        let ctx = StepContext { seed: 5, step: 1, dropout_p: 0.25 };
        let (_, hgrad, head_grad) = model.loss_and_grads(&batch, &tokens, ctx).unwrap();
        let groups = [hgrad.flatten(), head_grad.unwrap().flatten()];
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (g, analytic) in groups.iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let fd = (perturbed_loss(&model, &tokens, &batch, ctx, g, i, h)
                    - perturbed_loss(&model, &tokens, &batch, ctx, g, i, -h))
                    / (2.0 * h);
                let scale = a.abs().max(fd.abs());
                if scale > 1e-9 {
                    worst = worst.max((a - fd).abs() / scale);
                }
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn training_leaves_the_encoder_body_untouched() {
        let (mut model, tokens, batch) = micro_model();
        let before = model.frozen_checksum();
        for step in 0..3 {
            model
                .train_batch(&batch, &tokens, StepContext { seed: 1, step, dropout_p: 0.1 })
                .unwrap();
        }
        assert_eq!(before, model.frozen_checksum());
        assert_eq!(model.trainable().total() as usize, model.hyper.num_params() + model.encoder.head.num_params());
    }

    #[test]
    fn annotator_added_mid_training_keeps_optimizer_usable() {
        let (mut model, tokens, batch) = micro_model();
        let ctx = StepContext { seed: 1, step: 0, dropout_p: 0.0 };
        model.train_batch(&batch, &tokens, ctx).unwrap();
        let n = model.trainable().total();
        let new = model.add_annotator("late");
        assert_eq!(model.trainable().total() - n, model.hyper.config.annotator_embed_dim as u64);
        let row = model.hyper.ann_emb.row(new).to_owned();
        let late = [DenseRecord { item: batch[0].item, annotator: new, label: 1 }];
        model.train_batch(&late, &tokens, StepContext { step: 1, ..ctx }).unwrap();
        assert_ne!(row, model.hyper.ann_emb.row(new));
    }
}
