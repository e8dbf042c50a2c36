//! Small pre-norm transformer classifier with a hash tokenizer.
//!
//! Query and value projections accept optional low-rank overlays; the rest of
//! the network is a plain encoder. Forward passes record a [`EncodeTrace`] so
//! callers can run the matching backward pass for whichever parameters they
//! train.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::{attention_targets, AdapterSet, LoraFactors, Projection, TargetKey};
use crate::nn::{
    gelu, gelu_grad, normal_matrix, rng_for, softmax_in_place, LayerNorm, LayerNormCache, Linear,
};
use crate::params::{visit_child, visit_child_mut, ParamSet};

pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// L=2, d=64, 4 heads, ffn 128, vocab 2048.
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        Self {
            vocab_size: 2048,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 100,
            num_classes,
            seed,
        }
    }

    /// RoBERTa-base shapes (used for counting; too large to train here).
    pub fn roberta(num_classes: usize) -> Self {
        Self {
            vocab_size: 50265,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            max_seq_len: 100,
            num_classes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "needs room for the padding token"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("hidden_dim {} is not divisible by {}", self.hidden_dim, self.num_heads),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn targets(&self) -> Vec<TargetKey> {
        attention_targets(self.num_layers)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Whitespace split, FNV-1a hashed into `[1, vocab_size)`, truncated to
/// `max_seq_len`. Empty text yields a single padding token.
pub fn tokenize(text: &str, config: &EncoderConfig) -> Vec<usize> {
    let buckets = (config.vocab_size - 1) as u64;
    let mut tokens: Vec<usize> = text
        .split_whitespace()
        .take(config.max_seq_len)
        .map(|w| 1 + (fnv1a(w.as_bytes()) % buckets) as usize)
        .collect();
    if tokens.is_empty() {
        tokens.push(PAD);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    fn new(d: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, ffn, rng),
            ff2: Linear::new(ffn, d, rng),
        }
    }

    fn zeros(d: usize, ffn: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, ffn),
            ff2: Linear::zeros(ffn, d),
        }
    }

    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Query => &self.wq,
            Projection::Value => &self.wv,
        }
    }
}

impl ParamSet for Block {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("ln1", &self.ln1, f);
        visit_child("wq", &self.wq, f);
        visit_child("wk", &self.wk, f);
        visit_child("wv", &self.wv, f);
        visit_child("wo", &self.wo, f);
        visit_child("ln2", &self.ln2, f);
        visit_child("ff1", &self.ff1, f);
        visit_child("ff2", &self.ff2, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_child_mut("ln1", &mut self.ln1, f);
        visit_child_mut("wq", &mut self.wq, f);
        visit_child_mut("wk", &mut self.wk, f);
        visit_child_mut("wv", &mut self.wv, f);
        visit_child_mut("wo", &mut self.wo, f);
        visit_child_mut("ln2", &mut self.ln2, f);
        visit_child_mut("ff1", &mut self.ff1, f);
        visit_child_mut("ff2", &mut self.ff2, f);
    }
}

/// Embeddings, transformer blocks, and the final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBody {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl EncoderBody {
    pub fn zeros_like(&self) -> Self {
        let d = self.tok_emb.ncols();
        let ffn = self.blocks.first().map_or(0, |b| b.ff1.d_out());
        Self {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            blocks: self.blocks.iter().map(|_| Block::zeros(d, ffn)).collect(),
            final_ln: LayerNorm::zeros(d),
        }
    }
}

impl ParamSet for EncoderBody {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("tok_emb", self.tok_emb.shape(), self.tok_emb.as_slice().expect("contiguous"));
        f("pos_emb", self.pos_emb.shape(), self.pos_emb.as_slice().expect("contiguous"));
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("layers.{i}"), b, f);
        }
        visit_child("final_ln", &self.final_ln, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.tok_emb.shape().to_vec();
        f("tok_emb", &shape, self.tok_emb.as_slice_mut().expect("contiguous"));
        let shape = self.pos_emb.shape().to_vec();
        f("pos_emb", &shape, self.pos_emb.as_slice_mut().expect("contiguous"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("layers.{i}"), b, f);
        }
        visit_child_mut("final_ln", &mut self.final_ln, f);
    }
}

/// `out(tanh(dense(pooled)))`, shaped like a RoBERTa classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub dense: Linear,
    pub out: Linear,
}

pub struct HeadTrace {
    input: Array2<f64>,
    act: Array2<f64>,
}

impl ClassifierHead {
    pub fn new(d: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            dense: Linear::new(d, d, rng),
            out: Linear::new(d, num_classes, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dense: Linear::zeros(self.dense.d_in(), self.dense.d_out()),
            out: Linear::zeros(self.out.d_in(), self.out.d_out()),
        }
    }

    /// Logits for each row of `pooled`.
    pub fn forward(&self, pooled: ArrayView2<f64>) -> (Array2<f64>, HeadTrace) {
        let act = self.dense.forward_rows(pooled).mapv(f64::tanh);
        let logits = self.out.forward_rows(act.view());
        (
            logits,
            HeadTrace {
                input: pooled.to_owned(),
                act,
            },
        )
    }

    pub fn logits(&self, pooled: ArrayView1<f64>) -> Array1<f64> {
        let act = self.dense.forward_vec(pooled).mapv(f64::tanh);
        self.out.forward_vec(act.view())
    }

    /// Returns `dL/dpooled`.
    pub fn backward(
        &self,
        trace: &HeadTrace,
        dlogits: ArrayView2<f64>,
        grad: Option<&mut ClassifierHead>,
    ) -> Array2<f64> {
        let (g_dense, g_out) = match grad {
            Some(g) => (Some(&mut g.dense), Some(&mut g.out)),
            None => (None, None),
        };
        let mut dpre = self.out.backward_rows(trace.act.view(), dlogits, g_out);
        Zip::from(&mut dpre)
            .and(&trace.act)
            .for_each(|d, &a| *d *= 1.0 - a * a);
        self.dense.backward_rows(trace.input.view(), dpre.view(), g_dense)
    }
}

impl ParamSet for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("dense", &self.dense, f);
        visit_child("out", &self.out, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_child_mut("dense", &mut self.dense, f);
        visit_child_mut("out", &mut self.out, f);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenFlags {
    pub embeddings: bool,
    pub blocks: bool,
    pub head: bool,
}

impl FrozenFlags {
    pub fn all() -> Self {
        Self {
            embeddings: true,
            blocks: true,
            head: true,
        }
    }

    pub fn body(&self) -> bool {
        self.embeddings && self.blocks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub body: EncoderBody,
    pub head: ClassifierHead,
    pub frozen: FrozenFlags,
}

struct BlockTrace {
    ln1: LayerNormCache,
    z1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights, one `[T, T]` matrix per (sequence, head).
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LayerNormCache,
    z2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    /// `Z A^T` for the query / value overlays, when present.
    xa_q: Option<Array2<f64>>,
    xa_v: Option<Array2<f64>>,
}

/// Activations from [`Encoder::encode_batch`], consumed by the backward pass.
///
/// Sequences are packed row-wise so every position-wise layer runs as one
/// matrix product over the whole batch.
pub struct EncodeTrace {
    tokens: Vec<usize>,
    spans: Vec<(usize, usize)>,
    blocks: Vec<BlockTrace>,
    final_ln: LayerNormCache,
    pooled_rows: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub logits: Array1<f64>,
    pub pooled: Array1<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, &[0x454e_43]);
        let d = config.hidden_dim;
        let body = EncoderBody {
            tok_emb: normal_matrix(config.vocab_size, d, 1.0, &mut rng),
            pos_emb: normal_matrix(config.max_seq_len, d, 0.1, &mut rng),
            blocks: (0..config.num_layers)
                .map(|_| Block::new(d, config.ffn_dim, &mut rng))
                .collect(),
            final_ln: LayerNorm::new(d),
        };
        let head = ClassifierHead::new(d, config.num_classes, &mut rng);
        Ok(Self {
            config,
            body,
            head,
            frozen: FrozenFlags::default(),
        })
    }

    pub fn freeze_all(&mut self) {
        self.frozen = FrozenFlags::all();
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.config)
    }

    pub fn check_overlays(&self, overlays: &AdapterSet) -> Result<()> {
        let d = self.config.hidden_dim;
        for (key, f) in overlays.iter() {
            if key.layer >= self.config.num_layers {
                return Err(Error::contract(format!(
                    "overlay targets {key}, encoder has {} layers",
                    self.config.num_layers
                )));
            }
            if f.d_in() != d || f.d_out() != d {
                return Err(Error::contract(format!(
                    "overlay {key} maps {} -> {}, projection is {d} -> {d}",
                    f.d_in(),
                    f.d_out()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize], overlays: Option<&AdapterSet>) -> Result<EncoderOutput> {
        let (pooled, _) = self.encode(tokens, overlays)?;
        let logits = self.head.logits(pooled.view());
        Ok(EncoderOutput { logits, pooled })
    }

    /// Logits for a batch of sequences, one row each.
    pub fn logits_batch(&self, seqs: &[&[usize]], overlays: Option<&AdapterSet>) -> Result<Array2<f64>> {
        let (pooled, _) = self.encode_batch(seqs, overlays)?;
        Ok(self.head.forward(pooled.view()).0)
    }

    pub fn encode(
        &self,
        tokens: &[usize],
        overlays: Option<&AdapterSet>,
    ) -> Result<(Array1<f64>, EncodeTrace)> {
        let (pooled, trace) = self.encode_batch(&[tokens], overlays)?;
        Ok((pooled.row(0).to_owned(), trace))
    }

    /// Runs the body over each sequence and returns mean-pooled rows `[n, d]`.
    pub fn encode_batch(
        &self,
        seqs: &[&[usize]],
        overlays: Option<&AdapterSet>,
    ) -> Result<(Array2<f64>, EncodeTrace)> {
        if let Some(o) = overlays {
            self.check_overlays(o)?;
        }
        let cfg = &self.config;
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let start = tokens.len();
            if seq.is_empty() {
                tokens.push(PAD);
            } else {
                tokens.extend(seq.iter().take(cfg.max_seq_len));
            }
            spans.push((start, tokens.len() - start));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let d = cfg.hidden_dim;
        let mut x = Array2::zeros((tokens.len(), d));
        for &(start, len) in &spans {
            for p in 0..len {
                let mut row = x.row_mut(start + p);
                row.assign(&self.body.tok_emb.row(tokens[start + p]));
                row += &self.body.pos_emb.row(p);
            }
        }

        let mut traces = Vec::with_capacity(self.body.blocks.len());
        for (l, block) in self.body.blocks.iter().enumerate() {
            let lookup = |p| overlays.and_then(|o| o.get(&TargetKey::new(l, p)));
            let (out, trace) = block_forward(
                block,
                x,
                &spans,
                cfg,
                lookup(Projection::Query),
                lookup(Projection::Value),
            );
            traces.push(trace);
            x = out;
        }
        let (h, final_cache) = self.body.final_ln.forward(x.view());
        let mut pooled = Array2::zeros((spans.len(), d));
        let mut pooled_rows = Vec::with_capacity(spans.len());
        for (i, &(start, len)) in spans.iter().enumerate() {
            let mut rows: Vec<usize> = (start..start + len).filter(|&r| tokens[r] != PAD).collect();
            if rows.is_empty() {
                rows = (start..start + len).collect();
            }
            pooled.row_mut(i).assign(&crate::nn::mean_rows(h.view(), &rows));
            pooled_rows.push(rows);
        }
        Ok((
            pooled,
            EncodeTrace {
                tokens,
                spans,
                blocks: traces,
                final_ln: final_cache,
                pooled_rows,
            },
        ))
    }

    /// Backward through the body from `dL/dpooled` (`[n, d]`). Weight
    /// gradients go to `body_grad` when given; overlay factor gradients go to
    /// `adapter_grad` for every overlay that was active in the forward pass.
    pub fn backward_encode(
        &self,
        trace: &EncodeTrace,
        overlays: Option<&AdapterSet>,
        d_pooled: ArrayView2<f64>,
        mut body_grad: Option<&mut EncoderBody>,
        mut adapter_grad: Option<&mut AdapterSet>,
    ) {
        let cfg = &self.config;
        let mut dh = Array2::zeros((trace.tokens.len(), cfg.hidden_dim));
        for (i, rows) in trace.pooled_rows.iter().enumerate() {
            let share = 1.0 / rows.len() as f64;
            for &r in rows {
                dh.row_mut(r).scaled_add(share, &d_pooled.row(i));
            }
        }
        let mut dx = self.body.final_ln.backward(
            &trace.final_ln,
            dh.view(),
            body_grad.as_deref_mut().map(|g| &mut g.final_ln),
        );
        for (l, (block, bt)) in self.body.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let lookup = |p| overlays.and_then(|o| o.get(&TargetKey::new(l, p)));
            let bgrad = body_grad.as_deref_mut().map(|g| &mut g.blocks[l]);
            dx = block_backward(
                block,
                bt,
                dx,
                &trace.spans,
                cfg,
                bgrad,
                [lookup(Projection::Query), lookup(Projection::Value)],
                adapter_grad.as_deref_mut(),
                l,
            );
        }
        if let Some(g) = body_grad {
            for &(start, len) in &trace.spans {
                for p in 0..len {
                    let row = dx.row(start + p);
                    g.tok_emb.row_mut(trace.tokens[start + p]).scaled_add(1.0, &row);
                    g.pos_emb.row_mut(p).scaled_add(1.0, &row);
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("encoder");
        ck.set_meta("config", serde_json::to_string(&self.config).expect("plain data"));
        ck.set_meta("frozen", serde_json::to_string(&self.frozen).expect("plain data"));
        // embeddings and blocks carry separate frozen flags
        let mut tensors = Vec::new();
        self.body.visit(&mut |n, s, d| tensors.push((n.to_string(), s.to_vec(), d.to_vec())));
        for (name, shape, data) in tensors {
            let frozen = if name.ends_with("_emb") {
                self.frozen.embeddings
            } else {
                self.frozen.blocks
            };
            ck.tensors.push(crate::checkpoint::TensorEntry {
                name: format!("body.{name}"),
                frozen,
                shape,
                data,
            });
        }
        ck.push_params("head", &self.head, self.frozen.head);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "encoder" {
            return Err(Error::Checkpoint(format!("expected an encoder checkpoint, found `{}`", ck.kind)));
        }
        let config: EncoderConfig = serde_json::from_str(ck.meta("config")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let frozen: FrozenFlags = serde_json::from_str(ck.meta("frozen")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut enc = Encoder::new(config)?;
        ck.load_params("body", &mut enc.body)?;
        ck.load_params("head", &mut enc.head)?;
        enc.frozen = frozen;
        Ok(enc)
    }
}

impl ParamSet for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("body", &self.body, f);
        visit_child("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_child_mut("body", &mut self.body, f);
        visit_child_mut("head", &mut self.head, f);
    }
}

fn project(
    lin: &Linear,
    z: ArrayView2<f64>,
    overlay: Option<&LoraFactors>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = lin.forward_rows(z);
    let xa = overlay.map(|f| {
        let (delta, xa) = f.delta_rows(z);
        y += &delta;
        xa
    });
    (y, xa)
}

fn block_forward(
    block: &Block,
    x: Array2<f64>,
    spans: &[(usize, usize)],
    cfg: &EncoderConfig,
    over_q: Option<&LoraFactors>,
    over_v: Option<&LoraFactors>,
) -> (Array2<f64>, BlockTrace) {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (z1, ln1) = block.ln1.forward(x.view());
    let (q, xa_q) = project(&block.wq, z1.view(), over_q);
    let k = block.wk.forward_rows(z1.view());
    let (v, xa_v) = project(&block.wv, z1.view(), over_v);

    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(spans.len() * cfg.num_heads);
    for &(start, len) in spans {
        for h in 0..cfg.num_heads {
            let idx = s![start..start + len, h * dh..(h + 1) * dh];
            let mut scores = q.slice(idx).dot(&k.slice(idx).t());
            scores *= scale;
            for mut row in scores.rows_mut() {
                softmax_in_place(row.as_slice_mut().expect("contiguous"));
            }
            ctx.slice_mut(idx).assign(&scores.dot(&v.slice(idx)));
            probs.push(scores);
        }
    }
    let mut h_mid = block.wo.forward_rows(ctx.view());
    h_mid += &x;
    let (z2, ln2) = block.ln2.forward(h_mid.view());
    let u = block.ff1.forward_rows(z2.view());
    let g = u.mapv(gelu);
    let mut out = block.ff2.forward_rows(g.view());
    out += &h_mid;
    (
        out,
        BlockTrace {
            ln1,
            z1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            z2,
            u,
            g,
            xa_q,
            xa_v,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    block: &Block,
    bt: &BlockTrace,
    dout: Array2<f64>,
    spans: &[(usize, usize)],
    cfg: &EncoderConfig,
    mut grad: Option<&mut Block>,
    overlays: [Option<&LoraFactors>; 2],
    mut adapter_grad: Option<&mut AdapterSet>,
    layer: usize,
) -> Array2<f64> {
    let dh_size = cfg.head_dim();
    let scale = 1.0 / (dh_size as f64).sqrt();

    // feed-forward residual branch
    let mut du = block
        .ff2
        .backward_rows(bt.g.view(), dout.view(), grad.as_deref_mut().map(|g| &mut g.ff2));
    Zip::from(&mut du).and(&bt.u).for_each(|d, &u| *d *= gelu_grad(u));
    let dz2 = block
        .ff1
        .backward_rows(bt.z2.view(), du.view(), grad.as_deref_mut().map(|g| &mut g.ff1));
    let mut dh = block
        .ln2
        .backward(&bt.ln2, dz2.view(), grad.as_deref_mut().map(|g| &mut g.ln2));
    dh += &dout;

    // attention branch
    let dctx = block
        .wo
        .backward_rows(bt.ctx.view(), dh.view(), grad.as_deref_mut().map(|g| &mut g.wo));
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    let mut probs = bt.probs.iter();
    for &(start, len) in spans {
        for h in 0..cfg.num_heads {
            let p = probs.next().expect("one softmax per sequence and head");
            let idx = s![start..start + len, h * dh_size..(h + 1) * dh_size];
            let dctx_h = dctx.slice(idx);
            let dp = dctx_h.dot(&bt.v.slice(idx).t());
            dv.slice_mut(idx).assign(&p.t().dot(&dctx_h));
            // dS = P * (dP - rowsum(dP * P))
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            ds -= &row_dot.insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            dq.slice_mut(idx).assign(&ds.dot(&bt.k.slice(idx)));
            dk.slice_mut(idx).assign(&ds.t().dot(&bt.q.slice(idx)));
        }
    }
    let z1 = bt.z1.view();
    let mut dz1 = block
        .wq
        .backward_rows(z1, dq.view(), grad.as_deref_mut().map(|g| &mut g.wq));
    dz1 += &block
        .wk
        .backward_rows(z1, dk.view(), grad.as_deref_mut().map(|g| &mut g.wk));
    dz1 += &block
        .wv
        .backward_rows(z1, dv.view(), grad.as_deref_mut().map(|g| &mut g.wv));
    let lowrank = [
        (Projection::Query, overlays[0], &bt.xa_q, &dq),
        (Projection::Value, overlays[1], &bt.xa_v, &dv),
    ];
    for (p, over, xa, dy) in lowrank {
        if let (Some(f), Some(xa)) = (over, xa) {
            let g = adapter_grad
                .as_deref_mut()
                .and_then(|a| a.get_mut(&TargetKey::new(layer, p)));
            dz1 += &f.backward_rows(z1, xa.view(), dy.view(), g);
        }
    }
    let mut dx = block.ln1.backward(&bt.ln1, dz1.view(), grad.map(|g| &mut g.ln1));
    dx += &dh;
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_matrix;

    fn tiny(seed: u64) -> Encoder {
        Encoder::new(EncoderConfig {
            vocab_size: 11,
            hidden_dim: 4,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 6,
            max_seq_len: 8,
            num_classes: 2,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn tokenizer_is_deterministic_and_truncates() {
        let cfg = EncoderConfig::desk(2, 0);
        let t = tokenize("a b a", &cfg);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0], t[2]);
        assert_ne!(t[0], t[1]);
        assert!(t.iter().all(|&x| x >= 1 && x < cfg.vocab_size));
        let long: String = (0..150).map(|i| format!("w{i} ")).collect();
        assert_eq!(tokenize(&long, &cfg).len(), 100);
        assert_eq!(tokenize("", &cfg), vec![PAD]);
        assert_eq!(tokenize("   ", &cfg), vec![PAD]);
    }

    #[test]
    fn zero_b_overlays_leave_logits_unchanged() {
        let enc = tiny(1);
        let mut rng = rng_for(9, &[]);
        let mut set = AdapterSet::new();
        for t in enc.config.targets() {
            let a = uniform_matrix(2, 4, 1.0, &mut rng);
            set.insert(t, LoraFactors::new(a, Array2::zeros((4, 2)), 32.0).unwrap()).unwrap();
        }
        let tokens = [3, 1, 7, 7, 2];
        let base = enc.forward(&tokens, None).unwrap();
        let patched = enc.forward(&tokens, Some(&set)).unwrap();
        assert_eq!(base, patched);
        assert_eq!(base, enc.forward(&tokens, None).unwrap());
    }

    #[test]
    fn overlay_shape_mismatch_names_the_layer() {
        let enc = tiny(1);
        let mut set = AdapterSet::new();
        set.insert(TargetKey::new(1, Projection::Value), LoraFactors::zeros(1, 3, 4, 1.0)).unwrap();
        let err = enc.forward(&[1], Some(&set)).unwrap_err();
        assert!(err.to_string().contains("layers.1.v"), "{err}");
    }

    #[test]
    fn patched_projection_matches_dense_weight() {
        // one token, d=4, rank-1 overlay on layer 0 query: with a single
        // position softmax is 1 so the query does not matter; use value.
        let enc = tiny(2);
        let mut rng = rng_for(5, &[]);
        let a = uniform_matrix(1, 4, 1.0, &mut rng);
        let b = uniform_matrix(4, 1, 1.0, &mut rng);
        let fac = LoraFactors::new(a.clone(), b.clone(), 3.0).unwrap();
        let mut set = AdapterSet::new();
        set.insert(TargetKey::new(0, Projection::Value), fac).unwrap();
        let patched = enc.forward(&[4], Some(&set)).unwrap();

        let mut dense = enc.clone();
        let w = &mut dense.body.blocks[0].wv.weight;
        *w += &(b.dot(&a) * 3.0);
        let reference = dense.forward(&[4], None).unwrap();
        for (x, y) in patched.logits.iter().zip(reference.logits.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn loss_of(enc: &Encoder, tokens: &[usize], set: Option<&AdapterSet>, target: usize) -> f64 {
        let out = enc.forward(tokens, set).unwrap();
        crate::nn::cross_entropy(out.logits.view(), target).0
    }

    #[test]
    fn body_and_adapter_gradients_match_finite_differences() {
        let enc = tiny(3);
        let mut rng = rng_for(6, &[]);
        let mut set = AdapterSet::new();
        for t in enc.config.targets() {
            set.insert(
                t,
                LoraFactors::new(uniform_matrix(1, 4, 0.5, &mut rng), uniform_matrix(4, 1, 0.5, &mut rng), 2.0)
                    .unwrap(),
            )
            .unwrap();
        }
        let tokens = [3, 5, 3, 9];
        let (pooled, trace) = enc.encode(&tokens, Some(&set)).unwrap();
        let pooled = pooled.insert_axis(Axis(0));
        let (logits, htrace) = enc.head.forward(pooled.view());
        let (_, dlogits) = crate::nn::cross_entropy(logits.row(0), 1);
        let mut hgrad = enc.head.zeros_like();
        let dpooled = enc
            .head
            .backward(&htrace, dlogits.insert_axis(Axis(0)).view(), Some(&mut hgrad));
        let mut bgrad = enc.body.zeros_like();
        let mut agrad = AdapterSet::zeros(&enc.config.targets(), 1, 4, 2.0);
        enc.backward_encode(&trace, Some(&set), dpooled.view(), Some(&mut bgrad), Some(&mut agrad));

        let h = 1e-5;
        let check = |analytic: Vec<f64>, bump: &dyn Fn(usize, f64) -> f64| {
            for (i, &a) in analytic.iter().enumerate() {
                let fd = (bump(i, h) - bump(i, -h)) / (2.0 * h);
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!((fd - a).abs() / denom < 1e-4 || (fd - a).abs() < 1e-8, "param {i}: fd {fd} vs {a}");
            }
        };
        check(bgrad.flatten(), &|i, delta| {
            let mut e = enc.clone();
            let mut k = 0;
            e.body.visit_mut(&mut |_, _, d| {
                for x in d.iter_mut() {
                    if k == i {
                        *x += delta;
                    }
                    k += 1;
                }
            });
            loss_of(&e, &tokens, Some(&set), 1)
        });
        check(hgrad.flatten(), &|i, delta| {
            let mut e = enc.clone();
            let mut k = 0;
            e.head.visit_mut(&mut |_, _, d| {
                for x in d.iter_mut() {
                    if k == i {
                        *x += delta;
                    }
                    k += 1;
                }
            });
            loss_of(&e, &tokens, Some(&set), 1)
        });
        check(agrad.flatten(), &|i, delta| {
            let mut s = set.clone();
            let mut k = 0;
            s.visit_mut(&mut |_, _, d| {
                for x in d.iter_mut() {
                    if k == i {
                        *x += delta;
                    }
                    k += 1;
                }
            });
            loss_of(&enc, &tokens, Some(&s), 1)
        });
    }

    #[test]
    fn packed_batch_matches_one_at_a_time() {
        let enc = tiny(5);
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![], vec![7], vec![4, 4, 9, 10, 2, 1]];
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = enc.logits_batch(&refs, None).unwrap();
        for (i, seq) in seqs.iter().enumerate() {
            let single = enc.forward(seq, None).unwrap().logits;
            for (a, b) in batch.row(i).iter().zip(single.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits_and_flags() {
        let mut enc = tiny(4);
        enc.frozen = FrozenFlags { embeddings: true, blocks: true, head: false };
        let text = enc.to_checkpoint().to_text();
        let back = Encoder::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(back, enc);
        let bitmap = Checkpoint::parse(&text).unwrap().frozen_bitmap();
        assert!(bitmap.iter().filter(|b| !**b).count() == 4);
    }
}
