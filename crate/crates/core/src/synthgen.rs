//! Synthetic perspectivist corpora with known annotator personas.
//!
//! Every item has a dominant topic, a topic mixture, and a polarity. Its text
//! is a bag of pseudo-words drawn from topic- and polarity-keyed vocabulary
//! slices. A persona labels by the sign of its linear rule over the item
//! features and inverts that label on items whose dominant topic it flips.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{majority_label, AnnotationRecord, PerspectivistCorpus, TextItem};
use crate::error::{Error, Result};
use crate::metrics::annotator_level_f1;
use crate::nn::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub persona_id: String,
    /// Weights over `[polarity, topic mixture...]`.
    pub weight_vector: Vec<f64>,
    pub bias: f64,
    pub flip_topics: BTreeSet<usize>,
}

impl PersonaSpec {
    pub fn label(&self, latent: &ItemLatent) -> usize {
        let mut score = self.bias + self.weight_vector[0] * latent.polarity;
        for (w, m) in self.weight_vector[1..].iter().zip(&latent.mixture) {
            score += w * m;
        }
        let base = usize::from(score > 0.0);
        if self.flip_topics.contains(&latent.dominant_topic) {
            1 - base
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_annotators: usize,
    pub annotators_per_item: usize,
    pub num_topics: usize,
    pub num_personas: usize,
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_items: 2000,
            num_annotators: 20,
            annotators_per_item: 5,
            num_topics: 2,
            num_personas: 2,
            vocab_size: 400,
            noise_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Parses a flat TOML document; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = crate::io::parse_flat_toml(text, &Self::default())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_items", self.num_items),
            ("num_annotators", self.num_annotators),
            ("annotators_per_item", self.annotators_per_item),
            ("num_topics", self.num_topics),
            ("num_personas", self.num_personas),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.annotators_per_item > self.num_annotators {
            return Err(Error::config(
                "annotators_per_item",
                format!("{} exceeds num_annotators {}", self.annotators_per_item, self.num_annotators),
            ));
        }
        if self.vocab_size < 2 * self.num_topics {
            return Err(Error::config(
                "vocab_size",
                format!("needs at least 2 words per topic ({} topics)", self.num_topics),
            ));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", format!("must lie in [0, 0.5), got {}", self.noise_rate)));
        }
        Ok(())
    }
}

/// Hidden features of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemLatent {
    pub dominant_topic: usize,
    pub mixture: Vec<f64>,
    pub polarity: f64,
}

/// Everything the generator knows that the corpus does not show.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub personas: Vec<PersonaSpec>,
    /// Annotator id → index into `personas`.
    pub assignment: BTreeMap<String, usize>,
    /// Item id → latent features.
    pub latents: BTreeMap<String, ItemLatent>,
    pub noise_rate: f64,
}

impl SynthTruth {
    pub fn persona_of(&self, annotator_id: &str) -> Option<&PersonaSpec> {
        self.assignment.get(annotator_id).map(|&p| &self.personas[p])
    }

    /// Sidecar lines `{"annotator_id": .., "persona_id": ..}`.
    pub fn persona_jsonl(&self) -> String {
        let mut out = String::new();
        for (a, &p) in &self.assignment {
            let line = serde_json::json!({"annotator_id": a, "persona_id": self.personas[p].persona_id});
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_personas(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.persona_jsonl().as_bytes())
    }
}

const DOMINANT_MIN: f64 = 0.6;
const DOMINANT_MAX: f64 = 0.9;
const POLARITY_MARGIN: f64 = 0.5;
const MIN_LEN: usize = 10;
const MAX_LEN: usize = 30;

const ITEM_STREAM: u64 = 0x4954_454d;
const ANNOTATE_STREAM: u64 = 0x414e_4e4f;

/// Persona 0 follows the base rule; persona `k >= 1` flips topic `(k-1) mod T`.
pub fn personas(config: &SynthConfig) -> Vec<PersonaSpec> {
    (0..config.num_personas)
        .map(|k| {
            let mut weight_vector = vec![0.0; 1 + config.num_topics];
            weight_vector[0] = 1.0;
            let flip_topics = if k == 0 {
                BTreeSet::new()
            } else {
                BTreeSet::from([(k - 1) % config.num_topics])
            };
            PersonaSpec {
                persona_id: format!("p{k}"),
                weight_vector,
                bias: 0.0,
                flip_topics,
            }
        })
        .collect()
}

pub fn annotator_id(index: usize) -> String {
    format!("a{index:03}")
}

pub fn item_id(index: usize) -> String {
    format!("i{index:05}")
}

fn word(topic: usize, positive: bool, k: usize) -> String {
    format!("t{topic}{}{k}", if positive { 'p' } else { 'n' })
}

fn sample_item(config: &SynthConfig, rng: &mut impl Rng) -> (ItemLatent, String) {
    let t_count = config.num_topics;
    let dominant_topic = rng.random_range(0..t_count);
    let mut mixture = vec![0.0; t_count];
    if t_count == 1 {
        mixture[0] = 1.0;
    } else {
        let w = rng.random_range(DOMINANT_MIN..DOMINANT_MAX);
        for (t, m) in mixture.iter_mut().enumerate() {
            *m = if t == dominant_topic {
                w
            } else {
                (1.0 - w) / (t_count - 1) as f64
            };
        }
    }
    let magnitude = rng.random_range(POLARITY_MARGIN..=1.0);
    let polarity = if rng.random::<bool>() { magnitude } else { -magnitude };
    let slice = config.vocab_size / (2 * t_count);
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        let mut u = rng.random::<f64>();
        let mut topic = t_count - 1;
        for (t, &m) in mixture.iter().enumerate() {
            if u < m {
                topic = t;
                break;
            }
            u -= m;
        }
        let positive = rng.random::<f64>() < (1.0 + polarity) / 2.0;
        words.push(word(topic, positive, rng.random_range(0..slice)));
    }
    (
        ItemLatent {
            dominant_topic,
            mixture,
            polarity,
        },
        words.join(" "),
    )
}

/// Builds the corpus and the hidden truth behind it; fully determined by
/// `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(PerspectivistCorpus, SynthTruth)> {
    config.validate()?;
    let personas = personas(config);
    let mut item_rng = rng_for(config.seed, &[ITEM_STREAM]);
    let mut label_rng = rng_for(config.seed, &[ANNOTATE_STREAM]);
    let mut items = Vec::with_capacity(config.num_items);
    let mut records = Vec::with_capacity(config.num_items * config.annotators_per_item);
    let mut latents = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    for i in 0..config.num_items {
        let (latent, text) = sample_item(config, &mut item_rng);
        let id = item_id(i);
        let mut chosen = sample(&mut label_rng, config.num_annotators, config.annotators_per_item).into_vec();
        chosen.sort_unstable();
        for a in chosen {
            let persona = a % config.num_personas;
            let mut label = personas[persona].label(&latent);
            if label_rng.random::<f64>() < config.noise_rate {
                label = 1 - label;
            }
            let aid = annotator_id(a);
            assignment.insert(aid.clone(), persona);
            records.push(AnnotationRecord {
                item_id: id.clone(),
                annotator_id: aid,
                label,
            });
        }
        items.push(TextItem {
            item_id: id.clone(),
            text,
        });
        latents.insert(id, latent);
    }
    let corpus = PerspectivistCorpus::new(items, records, 2)?;
    Ok((
        corpus,
        SynthTruth {
            personas,
            assignment,
            latents,
            noise_rate: config.noise_rate,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ceilings {
    /// Annotator-level F1 of the per-item majority of the evaluated labels,
    /// the best one-label-per-item predictor can do up to F1's nonlinearity.
    pub single_task: f64,
    /// Annotator-level F1 of each annotator's noise-free persona label.
    pub bayes: f64,
}

/// Ceilings over `records` (all records when `None`).
pub fn oracle_ceiling(
    corpus: &PerspectivistCorpus,
    truth: &SynthTruth,
    records: Option<&[usize]>,
) -> Result<Ceilings> {
    let all: Vec<usize>;
    let records = match records {
        Some(r) => r,
        None => {
            all = (0..corpus.dense().len()).collect();
            &all
        }
    };
    let mut persona_pred = Vec::with_capacity(records.len());
    for &r in records {
        let rec = &corpus.records()[r];
        let latent = truth.latents.get(&rec.item_id).ok_or_else(|| {
            Error::Unsupported(format!("item `{}` was not produced by the generator", rec.item_id))
        })?;
        let persona = truth.persona_of(&rec.annotator_id).ok_or_else(|| {
            Error::Unsupported(format!("annotator `{}` has no persona", rec.annotator_id))
        })?;
        persona_pred.push(persona.label(latent));
    }
    let votes = corpus.votes(Some(records));
    let majority: Vec<usize> = records
        .iter()
        .map(|&r| {
            let item = corpus.dense()[r].item;
            majority_label(&votes[item], corpus.num_classes()).expect("item has a vote")
        })
        .collect();
    Ok(Ceilings {
        single_task: annotator_level_f1(corpus, records, &majority)?.0,
        bayes: annotator_level_f1(corpus, records, &persona_pred)?.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::disagreement;

    #[test]
    fn toml_config_keeps_defaults_and_rejects_bad_noise() {
        let c = SynthConfig::from_toml("num_items = 50\nseed = 3").unwrap();
        assert_eq!(c, SynthConfig { num_items: 50, seed: 3, ..SynthConfig::default() });
        let e = SynthConfig::from_toml("noise_rate = 0.7").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "noise_rate"), "{e}");
    }

    fn cfg(num_items: usize, personas: usize, noise: f64) -> SynthConfig {
        SynthConfig {
            num_items,
            num_personas: personas,
            noise_rate: noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn one_clean_persona_means_full_agreement() {
        let (corpus, truth) = generate(&cfg(300, 1, 0.0)).unwrap();
        for v in corpus.votes(None) {
            assert_eq!(disagreement(&v).unwrap(), 0.0);
        }
        let c = oracle_ceiling(&corpus, &truth, None).unwrap();
        assert_eq!((c.single_task, c.bayes), (1.0, 1.0));
    }

    #[test]
    fn same_seed_is_byte_identical_and_seeds_differ() {
        let dir = tempfile::tempdir().unwrap();
        let write = |seed: u64, name: &str| {
            let (c, t) = generate(&SynthConfig { seed, ..cfg(50, 2, 0.1) }).unwrap();
            let p = dir.path().join(name);
            c.write_jsonl(&p).unwrap();
            (std::fs::read(&p).unwrap(), t.persona_jsonl())
        };
        let a = write(7, "a.jsonl");
        assert_eq!(a, write(7, "b.jsonl"));
        assert_ne!(a.0, write(8, "c.jsonl").0);
        assert_eq!(a.0.iter().filter(|&&b| b == b'\n').count(), 50 * 5);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = generate(&cfg(10, 1, 0.7)).unwrap_err();
        assert!(err.to_string().contains("noise_rate"), "{err}");
        let err = SynthConfig { annotators_per_item: 30, ..SynthConfig::default() }
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("annotators_per_item"));
    }

    #[test]
    fn texts_have_documented_lengths_and_slices() {
        let (corpus, truth) = generate(&cfg(200, 2, 0.0)).unwrap();
        for item in corpus.items() {
            let words: Vec<&str> = item.text.split(' ').collect();
            assert!((MIN_LEN..=MAX_LEN).contains(&words.len()));
            let latent = &truth.latents[&item.item_id];
            let dominant = format!("t{}", latent.dominant_topic);
            let on_topic = words.iter().filter(|w| w.starts_with(&dominant)).count();
            assert!(on_topic * 3 >= words.len(), "{}", item.text);
        }
    }

    fn binomial(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn mean_disagreement_matches_hypergeometric_closed_form() {
        // 2 personas over 20 annotators (10 each), 5 per item, persona p1
        // flips topic 0 which dominates half the items
        let config = SynthConfig {
            num_items: 10_000,
            noise_rate: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let (corpus, _) = generate(&config).unwrap();
        let votes = corpus.votes(None);
        let observed: f64 =
            votes.iter().map(|v| disagreement(v).unwrap()).sum::<f64>() / votes.len() as f64;
        let (n, half, k) = (20, 10, 5);
        let mut flipped = 0.0;
        for m in 0..=k {
            let p = binomial(half, m) * binomial(n - half, k - m) / binomial(n, k);
            flipped += p * (1.0 - m.max(k - m) as f64 / k as f64);
        }
        let expected = 0.5 * flipped;
        assert!((observed - expected).abs() < 0.02, "{observed} vs {expected}");
    }

    #[test]
    fn noisy_single_persona_bayes_f1_is_one_minus_noise() {
        let (corpus, truth) = generate(&SynthConfig { seed: 5, ..cfg(5000, 1, 0.1) }).unwrap();
        let c = oracle_ceiling(&corpus, &truth, None).unwrap();
        assert!((c.bayes - 0.9).abs() < 0.01, "{}", c.bayes);
    }

    #[test]
    fn antagonistic_personas_open_a_gap_between_ceilings() {
        let config = SynthConfig {
            num_items: 200,
            annotators_per_item: 20,
            noise_rate: 0.05,
            seed: 9,
            ..SynthConfig::default()
        };
        let (corpus, truth) = generate(&config).unwrap();
        let c = oracle_ceiling(&corpus, &truth, None).unwrap();
        assert!(c.bayes - c.single_task >= 0.15, "{c:?}");
    }

    #[test]
    fn ceilings_weakly_decrease_with_noise() {
        let mut last = Ceilings { single_task: 1.0, bayes: 1.0 };
        for noise in [0.0, 0.1, 0.2] {
            let (corpus, truth) = generate(&SynthConfig { seed: 2, ..cfg(2000, 2, noise) }).unwrap();
            let c = oracle_ceiling(&corpus, &truth, None).unwrap();
            assert!(c.single_task <= last.single_task + 1e-9 && c.bayes <= last.bayes + 1e-9);
            last = c;
        }
    }

    #[test]
    fn foreign_corpus_is_unsupported() {
        let (corpus, mut truth) = generate(&cfg(20, 2, 0.0)).unwrap();
        truth.latents.clear();
        assert!(matches!(oracle_ceiling(&corpus, &truth, None), Err(Error::Unsupported(_))));
    }
}
