//! Trainable-parameter accounting.
//!
//! Counts are computed from the geometry alone; the unit tests cross-check
//! them against instantiated models.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::system::SystemKind;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub components: Vec<(String, u64)>,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.components.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Adapter settings that change the count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterShape {
    pub rank: usize,
    /// Whether the hypernet system trains the classifier head.
    pub train_classifier_head: bool,
}

impl Default for AdapterShape {
    fn default() -> Self {
        Self {
            rank: 2,
            train_classifier_head: true,
        }
    }
}

fn linear(d_in: u64, d_out: u64) -> u64 {
    d_in * d_out + d_out
}

pub fn embedding_params(g: &EncoderConfig) -> u64 {
    (g.vocab_size as u64 + g.max_seq_len as u64) * g.hidden_dim as u64
}

/// Transformer blocks plus the final layer norm.
pub fn body_params(g: &EncoderConfig) -> u64 {
    let d = g.hidden_dim as u64;
    let f = g.ffn_dim as u64;
    let block = 4 * linear(d, d) + 2 * 2 * d + linear(d, f) + linear(f, d);
    g.num_layers as u64 * block + 2 * d
}

pub fn head_params(g: &EncoderConfig) -> u64 {
    let d = g.hidden_dim as u64;
    linear(d, d) + linear(d, g.num_classes as u64)
}

/// Adapter factors for one annotator over every query/value target.
pub fn adapter_params(g: &EncoderConfig, rank: usize) -> u64 {
    let d = g.hidden_dim as u64;
    2 * g.num_layers as u64 * 2 * rank as u64 * d
}

fn encoder_components(g: &EncoderConfig) -> Vec<(String, u64)> {
    vec![
        ("encoder_embeddings".into(), embedding_params(g)),
        ("encoder_body".into(), body_params(g)),
        ("classifier_head".into(), head_params(g)),
    ]
}

/// Trainable parameters of `system` over an encoder of geometry `g` with
/// `num_annotators` annotators. Hypernet embedding widths equal `d`.
pub fn count_trainable(system: SystemKind, g: &EncoderConfig, num_annotators: usize, shape: AdapterShape) -> ParamBreakdown {
    let d = g.hidden_dim as u64;
    let n = num_annotators as u64;
    let components = match system {
        SystemKind::SingleTask => encoder_components(g),
        SystemKind::Aart => {
            let mut c = encoder_components(g);
            c.push(("annotator_embeddings".into(), n * d));
            c
        }
        SystemKind::Ae => {
            let mut c = encoder_components(g);
            c.push(("annotator_embeddings".into(), n * d));
            c.push(("annotation_embeddings".into(), n * d));
            c.push(("gates".into(), 2 * d + 2));
            c
        }
        SystemKind::SeparateLora => vec![
            ("adapters".into(), n * adapter_params(g, shape.rank)),
            ("classifier_heads".into(), n * head_params(g)),
        ],
        SystemKind::Hypernet => {
            let targets = 2 * g.num_layers as u64;
            let r = shape.rank as u64;
            let mut c = vec![
                ("annotator_embeddings".into(), n * d),
                ("target_embeddings".into(), targets * d),
                ("lin_a".into(), linear(2 * d, r * d)),
                ("lin_b".into(), linear(2 * d, d * r)),
            ];
            if shape.train_classifier_head {
                c.push(("classifier_head".into(), head_params(g)));
            }
            c
        }
    };
    ParamBreakdown { components }
}

/// Per-annotator cost of the separate-adapter system (adapters plus head).
pub fn separate_lora_per_annotator(g: &EncoderConfig, rank: usize) -> u64 {
    adapter_params(g, rank) + head_params(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{AartModel, AartSettings, AeModel, SeparateLoraModel, SingleTaskModel};
    use crate::corpus::{AnnotationRecord, PerspectivistCorpus, TextItem};
    use crate::encoder::Encoder;
    use crate::hypernet::{HypernetConfig, HypernetModel, HypernetState};
    use crate::params::ParamSet;
    use crate::system::PerspectiveModel;

    fn corpus(n_ann: usize) -> PerspectivistCorpus {
        let items = vec![TextItem { item_id: "x".into(), text: "a b".into() }];
        let records = (0..n_ann)
            .map(|a| AnnotationRecord { item_id: "x".into(), annotator_id: format!("a{a}"), label: a % 2 })
            .collect();
        PerspectivistCorpus::new(items, records, 2).unwrap()
    }

    #[test]
    fn roberta_geometry_counts() {
        let g = EncoderConfig::roberta(2);
        let s = AdapterShape::default();
        assert_eq!(count_trainable(SystemKind::SingleTask, &g, 0, s).total(), 124_328_450);
        assert_eq!(head_params(&g), 592_130);
        assert_eq!(adapter_params(&g, 2), 73_728);
        assert_eq!(separate_lora_per_annotator(&g, 2), 665_858);
        let hyper = |n| count_trainable(SystemKind::Hypernet, &g, n, s).total();
        assert_eq!(hyper(334), 5_588_738);
        assert_eq!(hyper(74), 5_389_058);
        assert_eq!(hyper(819), 5_961_218);
        assert_eq!(hyper(6), 5_336_834);
    }

    #[test]
    fn analytic_counts_match_instantiated_models() {
        let g = EncoderConfig::desk(2, 3);
        let n = 5;
        let s = AdapterShape::default();
        let c = corpus(n);
        let enc = Encoder::new(g.clone()).unwrap();
        assert_eq!(enc.body.num_params() as u64, embedding_params(&g) + body_params(&g));

        let count = |k| count_trainable(k, &g, n, s);
        let single = SingleTaskModel::new(enc.clone(), 1e-3);
        assert_eq!(single.trainable(), count(SystemKind::SingleTask));
        assert_eq!(single.encoder.num_params() as u64, count(SystemKind::SingleTask).total());
        let aart = AartModel::new(enc.clone(), &c, &[], AartSettings::default(), 1e-3, 1).unwrap();
        assert_eq!(aart.trainable(), count(SystemKind::Aart));
        let ae = AeModel::new(enc.clone(), n, 1e-3, 1);
        assert_eq!(ae.trainable(), count(SystemKind::Ae));
        assert_eq!(ae.params.num_params() as u64 + single.encoder.num_params() as u64, count(SystemKind::Ae).total());
        let sep = SeparateLoraModel::new(enc.clone(), n, 2, 32.0, 1e-3, 1).unwrap();
        assert_eq!(sep.trainable(), count(SystemKind::SeparateLora));

        let state = HypernetState::new(HypernetConfig::for_encoder(&g, n, 1)).unwrap();
        assert_eq!(state.num_params() as u64 + head_params(&g), count(SystemKind::Hypernet).total());
        let registry = (0..n).map(|a| format!("a{a}")).collect();
        let model = HypernetModel::new(enc, state, registry, 1e-3).unwrap();
        assert_eq!(model.trainable().total(), count(SystemKind::Hypernet).total());
    }

    #[test]
    fn one_more_annotator_costs_d() {
        let g = EncoderConfig::desk(2, 0);
        let s = AdapterShape::default();
        for n in [1, 7, 300] {
            let a = count_trainable(SystemKind::Hypernet, &g, n, s).total();
            let b = count_trainable(SystemKind::Hypernet, &g, n + 1, s).total();
            assert_eq!(b - a, g.hidden_dim as u64);
        }
    }

    #[test]
    fn frozen_head_is_not_counted() {
        let g = EncoderConfig::roberta(2);
        let s = AdapterShape { rank: 2, train_classifier_head: false };
        assert_eq!(count_trainable(SystemKind::Hypernet, &g, 6, s).total(), 5_336_834 - 592_130);
    }
}
