//! Optimisation loop, hyperparameter grid and multi-seed driver.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AartModel, AartSettings, AeModel, SeparateLoraModel, SingleTaskModel};
use crate::corpus::{stratified_split, DenseRecord, PerspectivistCorpus, SplitBundle, SplitRatios};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::hypernet::{HypernetConfig, HypernetModel, HypernetState};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::rng_for;
use crate::params::AdamSettings;
use crate::system::{PerspectiveModel, StepContext, SystemKind, TokenizedCorpus};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub system: SystemKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamSettings,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Hypernet,
            epochs: 5,
            batch_size: 100,
            learning_rate: 1e-5,
            adam: AdamSettings::default(),
            max_seq_len: 100,
            dropout_p: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        // zero is accepted so a run can act as a no-op baseline
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", format!("must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub system: SystemKind,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Dev micro-F1 after each epoch.
    pub dev_micro_f1: Vec<f64>,
    pub dev: MetricsReport,
    pub test: MetricsReport,
    pub steps: u64,
    pub duration_secs: f64,
    pub config_fingerprint: String,
}

/// Metrics for `records` (record indices into `corpus`).
pub fn evaluate_records(
    model: &dyn PerspectiveModel,
    corpus: &PerspectivistCorpus,
    tokens: &TokenizedCorpus,
    records: &[usize],
) -> Result<MetricsReport> {
    let dense: Vec<DenseRecord> = records.iter().map(|&r| corpus.dense()[r]).collect();
    let preds = model.predict(&dense, tokens)?;
    evaluate(corpus, records, &preds, &model.trainable())
}

/// Runs the epochs of `cfg` over `examples`; calls `after_epoch` with the
/// epoch index and its mean loss. Returns the number of steps taken.
fn fit(
    model: &mut dyn PerspectiveModel,
    examples: &[DenseRecord],
    tokens: &TokenizedCorpus,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&dyn PerspectiveModel, usize, f64) -> Result<()>,
) -> Result<u64> {
    if examples.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    model.set_learning_rate(cfg.learning_rate);
    let mut order = examples.to_vec();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = StepContext {
                seed: cfg.seed,
                step,
                dropout_p: cfg.dropout_p,
            };
            let loss = model.train_batch(batch, tokens, ctx)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: b,
                    lr: cfg.learning_rate,
                });
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        info!("{} epoch {} step {} loss {:.6}", model.kind(), epoch + 1, step, mean);
        after_epoch(&*model, epoch, mean)?;
    }
    Ok(step)
}

/// Trains `model` on the training records of `split`, tracking dev metrics
/// per epoch and scoring the test records once at the end.
pub fn train(
    model: &mut dyn PerspectiveModel,
    corpus: &PerspectivistCorpus,
    tokens: &TokenizedCorpus,
    split: &SplitBundle,
    cfg: &TrainConfig,
    fingerprint: &str,
) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let frozen = model.frozen_checksum();
    let examples = model.examples(corpus, &split.train);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut dev_micro_f1 = Vec::with_capacity(cfg.epochs);
    let mut dev = None;
    let steps = fit(model, &examples, tokens, cfg, |m, _, loss| {
        train_loss.push(loss);
        let report = evaluate_records(m, corpus, tokens, &split.dev)?;
        dev_micro_f1.push(report.micro_f1());
        dev = Some(report);
        Ok(())
    })?;
    assert_eq!(frozen, model.frozen_checksum(), "frozen parameters changed during training");
    let test = evaluate_records(&*model, corpus, tokens, &split.test)?;
    Ok(RunResult {
        system: model.kind(),
        seed: split.seed,
        train_loss,
        dev_micro_f1,
        dev: dev.expect("at least one epoch"),
        test,
        steps,
        duration_secs: start.elapsed().as_secs_f64(),
        config_fingerprint: fingerprint.to_string(),
    })
}

/// Trains every encoder parameter on item-majority labels of the `train`
/// records, then freezes the whole encoder.
pub fn pretrain_and_freeze(
    encoder: Encoder,
    corpus: &PerspectivistCorpus,
    tokens: &TokenizedCorpus,
    train: &[usize],
    cfg: &TrainConfig,
) -> Result<Encoder> {
    cfg.validate()?;
    let mut model = SingleTaskModel::new(encoder, cfg.learning_rate);
    let examples = model.examples(corpus, train);
    fit(&mut model, &examples, tokens, cfg, |_, _, _| Ok(()))?;
    let mut encoder = model.into_encoder();
    encoder.freeze_all();
    Ok(encoder)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Five epochs, batch 100, learning rate 1e-5.
    #[default]
    Standard,
    /// Higher learning rates for small randomly initialised encoders.
    Desk,
}

/// Every knob of an experiment, as read from a flat config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub system: SystemKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rank: usize,
    pub alpha: f64,
    pub train_classifier_head: bool,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_dropout_p: f64,
    pub lambda_reg: f64,
    pub lambda_con: f64,
    pub temperature: f64,
    pub agreement_threshold: f64,
    pub seeds: Vec<u64>,
}

pub const CONFIG_KEYS: [&str; 27] = [
    "preset",
    "system",
    "epochs",
    "batch_size",
    "learning_rate",
    "dropout_p",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "rank",
    "alpha",
    "train_classifier_head",
    "vocab_size",
    "hidden_dim",
    "num_layers",
    "num_heads",
    "ffn_dim",
    "max_seq_len",
    "pretrain_epochs",
    "pretrain_batch_size",
    "pretrain_learning_rate",
    "pretrain_dropout_p",
    "lambda_reg",
    "lambda_con",
    "temperature",
    "agreement_threshold",
    "seeds",
];

impl RunConfig {
    pub fn preset(preset: Preset, system: SystemKind) -> Self {
        let desk = EncoderConfig::desk(2, 0);
        let aart = AartSettings::default();
        let adam = AdamSettings::default();
        let separate = system == SystemKind::SeparateLora;
        let mut cfg = Self {
            preset,
            system,
            epochs: if separate { 10 } else { 5 },
            batch_size: 100,
            learning_rate: if separate { 5e-5 } else { 1e-5 },
            dropout_p: 0.25,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            rank: 2,
            alpha: 32.0,
            train_classifier_head: true,
            vocab_size: desk.vocab_size,
            hidden_dim: desk.hidden_dim,
            num_layers: desk.num_layers,
            num_heads: desk.num_heads,
            ffn_dim: desk.ffn_dim,
            max_seq_len: desk.max_seq_len,
            pretrain_epochs: 5,
            pretrain_batch_size: 100,
            pretrain_learning_rate: 1e-5,
            pretrain_dropout_p: 0.1,
            lambda_reg: aart.lambda_reg,
            lambda_con: aart.lambda_con,
            temperature: aart.temperature,
            agreement_threshold: aart.agreement_threshold,
            seeds: (1..=10).collect(),
        };
        if preset == Preset::Desk {
            cfg.pretrain_epochs = 8;
            cfg.pretrain_batch_size = 32;
            cfg.pretrain_learning_rate = 1e-3;
            cfg.dropout_p = 0.1;
            cfg.learning_rate = match system {
                SystemKind::Hypernet | SystemKind::Aart => 2e-4,
                SystemKind::SeparateLora => 3e-3,
                SystemKind::Ae | SystemKind::SingleTask => 1e-3,
            };
            if system == SystemKind::SingleTask {
                cfg.epochs = cfg.pretrain_epochs;
                cfg.batch_size = cfg.pretrain_batch_size;
                cfg.learning_rate = cfg.pretrain_learning_rate;
                cfg.dropout_p = cfg.pretrain_dropout_p;
            }
        }
        cfg
    }

    /// Parses a flat TOML document. `preset` and `system` choose the
    /// defaults; every other key overrides one of them.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_for(text, None)
    }

    /// Like [`RunConfig::from_toml`], with `system` supplied out of band.
    /// A document naming a different system is rejected.
    pub fn from_toml_for(text: &str, system: Option<SystemKind>) -> Result<Self> {
        let mut table = crate::io::parse_toml_table(text)?;
        for key in table.keys() {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::config(key, "unknown key"));
            }
        }
        if let Some(kind) = system {
            let name = kind.to_string();
            match table.get("system") {
                Some(toml::Value::String(s)) if *s != name => {
                    return Err(Error::config("system", format!("config names `{s}` but `{name}` was requested")));
                }
                _ => {
                    table.insert("system".into(), toml::Value::String(name));
                }
            }
        }
        let str_key = |k: &str| -> Result<Option<String>> {
            match table.get(k) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(Error::config(k, "expected a string")),
            }
        };
        let preset = match str_key("preset")?.as_deref() {
            None | Some("standard") => Preset::Standard,
            Some("desk") => Preset::Desk,
            Some(other) => return Err(Error::config("preset", format!("unknown preset `{other}` (expected standard or desk)"))),
        };
        let system = match str_key("system")? {
            Some(s) => s.parse()?,
            None => SystemKind::Hypernet,
        };
        let defaults = Self::preset(preset, system);
        let base = match toml::Value::try_from(&defaults).expect("plain data") {
            toml::Value::Table(t) => t,
            _ => unreachable!("struct serialises to a table"),
        };
        for (key, value) in &table {
            let mut probe = base.clone();
            probe.insert(key.clone(), value.clone());
            if let Err(e) = toml::Value::Table(probe).try_into::<Self>() {
                return Err(Error::config(key, e.message().trim().to_string()));
            }
        }
        let mut merged = base;
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        self.pretrain_config(0).validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(&format!("pretrain_{field}"), message),
            other => other,
        })?;
        self.encoder_config(2, 0).validate()?;
        if self.rank == 0 {
            return Err(Error::config("rank", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be > 0"));
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        self.aart_settings().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        hex::encode(Sha256::digest(&json))
    }

    pub fn encoder_config(&self, num_classes: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            num_classes,
            seed,
        }
    }

    fn adam(&self) -> AdamSettings {
        AdamSettings {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            system: self.system,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam: self.adam(),
            max_seq_len: self.max_seq_len,
            dropout_p: self.dropout_p,
            seed,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            system: SystemKind::SingleTask,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            adam: self.adam(),
            max_seq_len: self.max_seq_len,
            dropout_p: self.pretrain_dropout_p,
            seed,
        }
    }

    pub fn aart_settings(&self) -> AartSettings {
        AartSettings {
            lambda_reg: self.lambda_reg,
            lambda_con: self.lambda_con,
            temperature: self.temperature,
            agreement_threshold: self.agreement_threshold,
        }
    }
}

/// The frozen base every non-single-task system starts from.
pub fn base_encoder(
    cfg: &RunConfig,
    corpus: &PerspectivistCorpus,
    tokens: &TokenizedCorpus,
    split: &SplitBundle,
    seed: u64,
) -> Result<Encoder> {
    let encoder = Encoder::new(cfg.encoder_config(corpus.num_classes(), seed))?;
    if cfg.system == SystemKind::SingleTask {
        return Ok(encoder);
    }
    pretrain_and_freeze(encoder, corpus, tokens, &split.train, &cfg.pretrain_config(seed))
}

/// Instantiates `cfg.system` on top of `base`.
pub fn build_system(
    cfg: &RunConfig,
    base: Encoder,
    corpus: &PerspectivistCorpus,
    split: &SplitBundle,
    seed: u64,
) -> Result<Box<dyn PerspectiveModel>> {
    let lr = cfg.learning_rate;
    let n = corpus.num_annotators();
    let init = crate::nn::derive_seed(seed, &[INIT_STREAM]);
    Ok(match cfg.system {
        SystemKind::SingleTask => Box::new(SingleTaskModel::new(base, lr)),
        SystemKind::Aart => Box::new(AartModel::new(base, corpus, &split.train, cfg.aart_settings(), lr, init)?),
        SystemKind::Ae => Box::new(AeModel::new(base, n, lr, init)),
        SystemKind::SeparateLora => Box::new(SeparateLoraModel::new(base, n, cfg.rank, cfg.alpha, lr, init)?),
        SystemKind::Hypernet => {
            let mut hc = HypernetConfig::for_encoder(&base.config, n, init);
            hc.rank = cfg.rank;
            hc.alpha = cfg.alpha;
            hc.dropout_p = cfg.dropout_p;
            hc.train_classifier_head = cfg.train_classifier_head;
            let state = HypernetState::new(hc)?;
            let registry = corpus.annotators().ids().to_vec();
            Box::new(HypernetModel::new(base, state, registry, lr)?)
        }
    })
}

/// Split, base encoder, system and training for one seed.
pub fn run_seed(corpus: &PerspectivistCorpus, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let split = stratified_split(corpus, seed, SplitRatios::default())?;
    let tokens = TokenizedCorpus::new(corpus, &cfg.encoder_config(corpus.num_classes(), seed));
    let base = base_encoder(cfg, corpus, &tokens, &split, seed)?;
    let mut model = build_system(cfg, base, corpus, &split, seed)?;
    train(model.as_mut(), corpus, &tokens, &split, &cfg.train_config(seed), &cfg.fingerprint())
}

/// Applies `f` to every input on up to `jobs` threads; output order follows
/// input order.
pub fn par_map<T: Sync, R: Send>(inputs: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(inputs.len().max(1));
    if jobs == 1 {
        return inputs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= inputs.len() {
                    break;
                }
                let r = f(&inputs[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
    /// Seeds contributing a value.
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    if values.iter().all(|&v| v == values[0]) {
        return Some(MetricSummary { mean: values[0], std: 0.0, n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MetricSummary { mean, std, n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub system: SystemKind,
    pub seeds: Vec<u64>,
    pub config_fingerprint: String,
    pub trainable_params: u64,
    /// Test metrics; a metric absent in every seed is left out.
    pub test: BTreeMap<String, MetricSummary>,
    pub dev: BTreeMap<String, MetricSummary>,
}

pub const METRIC_NAMES: [&str; 4] = ["annotator_f1", "global_f1", "global_accuracy", "disagreement_corr"];

fn metric(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "annotator_f1" => Some(report.annotator_f1),
        "global_f1" => Some(report.global_f1),
        "global_accuracy" => Some(report.global_accuracy),
        "disagreement_corr" => report.disagreement_corr,
        _ => None,
    }
}

fn summaries(reports: &[&MetricsReport]) -> BTreeMap<String, MetricSummary> {
    METRIC_NAMES
        .iter()
        .filter_map(|&name| {
            let values: Vec<f64> = reports.iter().filter_map(|r| metric(r, name)).collect();
            summarize(&values).map(|s| (name.to_string(), s))
        })
        .collect()
}

pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::contract("nothing to aggregate"))?;
    Ok(Aggregate {
        system: first.system,
        seeds: results.iter().map(|r| r.seed).collect(),
        config_fingerprint: first.config_fingerprint.clone(),
        trainable_params: first.test.trainable_params,
        test: summaries(&results.iter().map(|r| &r.test).collect::<Vec<_>>()),
        dev: summaries(&results.iter().map(|r| &r.dev).collect::<Vec<_>>()),
    })
}

/// One run per seed, each with its own split, then mean and sample std.
pub fn multi_seed(
    corpus: &PerspectivistCorpus,
    cfg: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<(Vec<RunResult>, Aggregate)> {
    if seeds.len() < 2 {
        return Err(Error::config("seeds", "need at least 2 seeds"));
    }
    let results = par_map(seeds, jobs, |&s| run_seed(corpus, cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&results)?;
    Ok((results, agg))
}

pub const GRID_DROPOUTS: [f64; 3] = [0.0, 0.1, 0.25];
pub const GRID_LEARNING_RATES: [f64; 3] = [5e-5, 1e-5, 5e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub dev_micro_f1: f64,
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub system: SystemKind,
    pub seed: u64,
    pub cells: Vec<GridCell>,
    /// Index into `cells`.
    pub selected: usize,
    pub config_fingerprint: String,
}

/// Highest dev micro-F1; ties go to the lower learning rate, then the
/// higher dropout.
pub fn select_cell(cells: &[(f64, f64, f64)]) -> Option<usize> {
    (0..cells.len()).max_by(|&a, &b| {
        let (da, la, fa) = cells[a];
        let (db, lb, fb) = cells[b];
        fa.total_cmp(&fb)
            .then(lb.total_cmp(&la))
            .then(da.total_cmp(&db))
    })
}

/// Trains one run per (dropout, learning rate) cell on the split of `seed`.
/// Every cell starts from the same base encoder.
pub fn grid_search(
    corpus: &PerspectivistCorpus,
    cfg: &RunConfig,
    seed: u64,
    dropouts: &[f64],
    learning_rates: &[f64],
    jobs: usize,
) -> Result<GridReport> {
    cfg.validate()?;
    let split = stratified_split(corpus, seed, SplitRatios::default())?;
    let tokens = TokenizedCorpus::new(corpus, &cfg.encoder_config(corpus.num_classes(), seed));
    let base = base_encoder(cfg, corpus, &tokens, &split, seed)?;
    let grid: Vec<(f64, f64)> = dropouts
        .iter()
        .flat_map(|&d| learning_rates.iter().map(move |&l| (d, l)))
        .collect();
    let fingerprint = cfg.fingerprint();
    let cells = par_map(&grid, jobs, |&(dropout_p, learning_rate)| {
        let cell = RunConfig {
            dropout_p,
            learning_rate,
            ..cfg.clone()
        };
        let mut model = build_system(&cell, base.clone(), corpus, &split, seed)?;
        let result = train(model.as_mut(), corpus, &tokens, &split, &cell.train_config(seed), &fingerprint)?;
        Ok(GridCell {
            dropout_p,
            learning_rate,
            dev_micro_f1: result.dev.micro_f1(),
            result,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let keys: Vec<(f64, f64, f64)> = cells
        .iter()
        .map(|c| (c.dropout_p, c.learning_rate, c.dev_micro_f1))
        .collect();
    let selected = select_cell(&keys).ok_or_else(|| Error::contract("empty grid"))?;
    Ok(GridReport {
        system: cfg.system,
        seed,
        cells,
        selected,
        config_fingerprint: fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    fn small_corpus() -> PerspectivistCorpus {
        let cfg = SynthConfig {
            num_items: 60,
            num_annotators: 6,
            annotators_per_item: 3,
            ..SynthConfig::default()
        };
        generate(&cfg).unwrap().0
    }

    fn tiny(system: SystemKind) -> RunConfig {
        RunConfig {
            epochs: 2,
            batch_size: 16,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_layers: 1,
            vocab_size: 128,
            max_seq_len: 32,
            pretrain_epochs: 1,
            pretrain_batch_size: 16,
            ..RunConfig::preset(Preset::Desk, system)
        }
    }

    #[test]
    fn batch_count_follows_epochs_and_batch_size() {
        let corpus = small_corpus();
        let cfg = tiny(SystemKind::Hypernet);
        let r = run_seed(&corpus, &cfg, 1).unwrap();
        let split = stratified_split(&corpus, 1, SplitRatios::default()).unwrap();
        let per_epoch = split.train.len().div_ceil(16) as u64;
        assert_eq!(r.steps, 2 * per_epoch);
        assert_eq!(r.train_loss.len(), 2);
        assert_eq!(r.dev_micro_f1.len(), 2);
        assert!(r.train_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn runs_are_deterministic() {
        let corpus = small_corpus();
        for system in SystemKind::ALL {
            let cfg = tiny(system);
            let a = run_seed(&corpus, &cfg, 3).unwrap();
            let b = run_seed(&corpus, &cfg, 3).unwrap();
            assert_eq!(a.train_loss, b.train_loss, "{system}");
            assert_eq!(a.test, b.test, "{system}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_metrics_unchanged() {
        let corpus = small_corpus();
        for system in SystemKind::ALL {
            let cfg = RunConfig {
                learning_rate: 0.0,
                ..tiny(system)
            };
            let split = stratified_split(&corpus, 2, SplitRatios::default()).unwrap();
            let tokens = TokenizedCorpus::new(&corpus, &cfg.encoder_config(2, 2));
            let base = base_encoder(&cfg, &corpus, &tokens, &split, 2).unwrap();
            let mut model = build_system(&cfg, base, &corpus, &split, 2).unwrap();
            let before = evaluate_records(model.as_ref(), &corpus, &tokens, &split.test).unwrap();
            let r = train(model.as_mut(), &corpus, &tokens, &split, &cfg.train_config(2), "").unwrap();
            assert_eq!(before, r.test, "{system}");
        }
    }

    struct Diverging(SingleTaskModel);

    impl PerspectiveModel for Diverging {
        fn kind(&self) -> SystemKind {
            SystemKind::SingleTask
        }

        fn train_batch(&mut self, batch: &[DenseRecord], tokens: &TokenizedCorpus, ctx: StepContext) -> Result<f64> {
            let loss = self.0.train_batch(batch, tokens, ctx)?;
            Ok(if ctx.step == 3 { f64::NAN } else { loss })
        }

        fn predict(&self, records: &[DenseRecord], tokens: &TokenizedCorpus) -> Result<Vec<usize>> {
            self.0.predict(records, tokens)
        }

        fn trainable(&self) -> crate::metrics::ParamBreakdown {
            self.0.trainable()
        }

        fn set_learning_rate(&mut self, lr: f64) {
            self.0.set_learning_rate(lr)
        }

        fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
            self.0.to_checkpoint()
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let corpus = small_corpus();
        let cfg = RunConfig {
            batch_size: 4,
            ..tiny(SystemKind::SingleTask)
        };
        let split = stratified_split(&corpus, 1, SplitRatios::default()).unwrap();
        let tokens = TokenizedCorpus::new(&corpus, &cfg.encoder_config(2, 1));
        let base = Encoder::new(cfg.encoder_config(2, 1)).unwrap();
        let mut model = Diverging(SingleTaskModel::new(base, 1e-3));
        match train(&mut model, &corpus, &tokens, &split, &cfg.train_config(1), "") {
            Err(e @ Error::NonFiniteLoss { .. }) => {
                assert!(matches!(e, Error::NonFiniteLoss { step: 3, batch: 3, .. }));
                assert_eq!(e.exit_code(), 3);
            }
            other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.train_loss)),
        }
    }

    #[test]
    fn tie_break_prefers_lower_lr_then_higher_dropout() {
        let cells: Vec<(f64, f64, f64)> = GRID_DROPOUTS
            .iter()
            .flat_map(|&d| GRID_LEARNING_RATES.iter().map(move |&l| (d, l, 0.5)))
            .collect();
        let i = select_cell(&cells).unwrap();
        assert_eq!((cells[i].0, cells[i].1), (0.25, 5e-6));
        let mut better = cells.clone();
        better[0].2 = 0.6;
        assert_eq!(select_cell(&better), Some(0));
    }

    #[test]
    fn sample_std_examples() {
        let s = summarize(&[0.6, 0.8]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[0.4, 0.4, 0.4]).unwrap().std, 0.0);
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..37).collect();
        assert_eq!(par_map(&xs, 4, |x| x * x), xs.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn multi_seed_needs_two_seeds_and_ignores_job_count() {
        let corpus = small_corpus();
        let cfg = tiny(SystemKind::Aart);
        assert!(matches!(multi_seed(&corpus, &cfg, &[1], 1), Err(Error::Config { .. })));
        let (a, agg_a) = multi_seed(&corpus, &cfg, &[1, 2], 1).unwrap();
        let (b, agg_b) = multi_seed(&corpus, &cfg, &[1, 2], 2).unwrap();
        assert_eq!(agg_a, agg_b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].test, b[1].test);
    }

    #[test]
    fn config_round_trips_and_names_bad_fields() {
        let cfg = RunConfig::from_toml("preset = \"desk\"\nsystem = \"aart\"\nepochs = 7\nseeds = [4, 5]\n").unwrap();
        assert_eq!(cfg.system, SystemKind::Aart);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let field = |text: &str| match RunConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("epochs = 0"), "epochs");
        assert_eq!(field("learning_rate = \"fast\""), "learning_rate");
        assert_eq!(field("dropout_p = 1.5"), "dropout_p");
        assert_eq!(field("colour = 3"), "colour");
        assert_eq!(field("system = \"lora\""), "system");
        assert_eq!(field("pretrain_batch_size = 0"), "pretrain_batch_size");
        assert_eq!(field("num_heads = 3"), "num_heads");
    }

    #[test]
    fn separate_lora_defaults_differ() {
        let cfg = RunConfig::preset(Preset::Standard, SystemKind::SeparateLora);
        assert_eq!((cfg.epochs, cfg.learning_rate), (10, 5e-5));
        let cfg = RunConfig::preset(Preset::Standard, SystemKind::Hypernet);
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.learning_rate), (5, 100, 1e-5));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = RunConfig::preset(Preset::Desk, SystemKind::Ae);
        let b = RunConfig { epochs: 6, ..a.clone() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
