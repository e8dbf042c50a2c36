//! Perspectivist data model: items, per-annotator labels, majority
//! aggregation, item disagreement, and the disagreement-stratified split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub annotator_id: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub item_id: String,
    pub text: String,
}

/// Annotator ids mapped to dense indices in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotatorRegistry {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnnotatorRegistry {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }
}

/// Dense view of one record: item index, annotator index, label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DenseRecord {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerspectivistCorpus {
    items: Vec<TextItem>,
    records: Vec<AnnotationRecord>,
    dense: Vec<DenseRecord>,
    annotators: AnnotatorRegistry,
    item_index: HashMap<String, usize>,
    num_classes: usize,
}

impl PerspectivistCorpus {
    pub fn new(
        items: Vec<TextItem>,
        records: Vec<AnnotationRecord>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Schema(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let mut item_index = HashMap::with_capacity(items.len());
        let mut items = items;
        for (i, item) in items.iter_mut().enumerate() {
            let trimmed = item.text.trim();
            if trimmed.is_empty() {
                return Err(Error::Integrity(format!("item `{}` has empty text", item.item_id)));
            }
            if trimmed.len() != item.text.len() {
                item.text = trimmed.to_string();
            }
            if item_index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate item id `{}`", item.item_id)));
            }
        }
        let mut annotators = AnnotatorRegistry::default();
        let mut seen = HashSet::with_capacity(records.len());
        let mut dense = Vec::with_capacity(records.len());
        for r in &records {
            let item = *item_index.get(&r.item_id).ok_or_else(|| {
                Error::Integrity(format!("record references unknown item `{}`", r.item_id))
            })?;
            if r.label >= num_classes {
                return Err(Error::Schema(format!(
                    "label {} out of range for {num_classes} classes (item `{}`)",
                    r.label, r.item_id
                )));
            }
            let annotator = annotators.insert(&r.annotator_id);
            if !seen.insert((item, annotator)) {
                return Err(Error::Integrity(format!(
                    "duplicate annotation of item `{}` by `{}`",
                    r.item_id, r.annotator_id
                )));
            }
            dense.push(DenseRecord {
                item,
                annotator,
                label: r.label,
            });
        }
        Ok(Self {
            items,
            records,
            dense,
            annotators,
            item_index,
            num_classes,
        })
    }

    pub fn items(&self) -> &[TextItem] {
        &self.items
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn dense(&self) -> &[DenseRecord] {
        &self.dense
    }

    pub fn annotators(&self) -> &AnnotatorRegistry {
        &self.annotators
    }

    pub fn num_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    /// Labels per item over the given records (all records when `None`).
    pub fn votes(&self, records: Option<&[usize]>) -> Vec<Vec<usize>> {
        let mut votes = vec![Vec::new(); self.items.len()];
        let mut push = |r: &DenseRecord| votes[r.item].push(r.label);
        match records {
            Some(idx) => idx.iter().for_each(|&i| push(&self.dense[i])),
            None => self.dense.iter().for_each(push),
        }
        votes
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            let item = &self.items[self.item_index[&r.item_id]];
            let line = serde_json::json!({
                "item_id": r.item_id,
                "text": item.text,
                "annotator_id": r.annotator_id,
                "label": r.label,
            });
            writeln!(buf, "{line}").expect("in-memory write");
        }
        crate::io::write_atomic(path, &buf)
    }
}

/// Maps external column names onto the canonical record keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub item_id: String,
    pub text: String,
    pub annotator_id: String,
    pub label: String,
    pub num_classes: usize,
    /// Raw label values in class-index order. When absent, labels must be
    /// integers in `[0, num_classes)`.
    pub label_values: Option<Vec<String>>,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            item_id: "item_id".into(),
            text: "text".into(),
            annotator_id: "annotator_id".into(),
            label: "label".into(),
            num_classes: 2,
            label_values: None,
        }
    }
}

impl FieldMap {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("field map: {e}")))
    }

    fn num_classes(&self) -> usize {
        self.label_values.as_ref().map_or(self.num_classes, Vec::len)
    }

    fn label_of(&self, value: &serde_json::Value, line: usize) -> Result<usize> {
        let unknown = || Error::Schema(format!("line {line}: unknown label value {value}"));
        match &self.label_values {
            Some(values) => {
                let raw = match value {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                values.iter().position(|v| *v == raw).ok_or_else(unknown)
            }
            None => value
                .as_u64()
                .map(|v| v as usize)
                .filter(|&v| v < self.num_classes)
                .ok_or_else(unknown),
        }
    }
}

fn opaque_string(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn load_jsonl(path: &Path, schema: &FieldMap) -> Result<PerspectivistCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, schema)
}

pub fn parse_jsonl(text: &str, schema: &FieldMap) -> Result<PerspectivistCorpus> {
    let mut items: Vec<TextItem> = Vec::new();
    let mut item_pos: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        let field = |name: &str| {
            obj.get(name)
                .ok_or_else(|| Error::Schema(format!("line {line}: missing field `{name}`")))
        };
        let id_field = |name: &str| {
            field(name).and_then(|v| {
                opaque_string(v).ok_or_else(|| {
                    Error::Schema(format!("line {line}: field `{name}` must be a string or number"))
                })
            })
        };
        let item_id = id_field(&schema.item_id)?;
        let annotator_id = id_field(&schema.annotator_id)?;
        let text = field(&schema.text)?
            .as_str()
            .ok_or_else(|| Error::Schema(format!("line {line}: field `{}` must be a string", schema.text)))?
            .trim()
            .to_string();
        let label = schema.label_of(field(&schema.label)?, line)?;

        match item_pos.get(&item_id) {
            Some(&p) if items[p].text != text => {
                return Err(Error::Integrity(format!(
                    "line {line}: item `{item_id}` appears with conflicting text"
                )))
            }
            Some(_) => {}
            None => {
                item_pos.insert(item_id.clone(), items.len());
                items.push(TextItem {
                    item_id: item_id.clone(),
                    text,
                });
            }
        }
        if !seen.insert((item_id.clone(), annotator_id.clone())) {
            return Err(Error::Integrity(format!(
                "line {line}: duplicate annotation of item `{item_id}` by `{annotator_id}`"
            )));
        }
        records.push(AnnotationRecord {
            item_id,
            annotator_id,
            label,
        });
    }
    PerspectivistCorpus::new(items, records, schema.num_classes())
}

/// Plurality class; ties go to the lowest class index.
pub fn majority_label(votes: &[usize], num_classes: usize) -> Option<usize> {
    if votes.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; num_classes.max(votes.iter().max().map_or(0, |m| m + 1))];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Some(best)
}

/// Majority label for every item, keyed by item id.
pub fn majority_labels(corpus: &PerspectivistCorpus) -> Result<std::collections::BTreeMap<String, usize>> {
    let votes = corpus.votes(None);
    corpus
        .items()
        .iter()
        .zip(&votes)
        .map(|(item, v)| {
            majority_label(v, corpus.num_classes())
                .map(|m| (item.item_id.clone(), m))
                .ok_or_else(|| Error::contract(format!("item `{}` has no records", item.item_id)))
        })
        .collect()
}

/// `1 - (plurality count) / K`.
pub fn disagreement(votes: &[usize]) -> Result<f64> {
    if votes.is_empty() {
        return Err(Error::contract("disagreement of an empty vote set"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(1.0 - max as f64 / votes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.5,
            dev: 0.25,
            test: 0.25,
        }
    }
}

/// Number of disagreement strata: four equal-width bins over `[0, 0.5]` plus
/// one for `d > 0.5`.
pub const NUM_STRATA: usize = 5;

pub fn stratum_of(d: f64) -> usize {
    if d > 0.5 {
        4
    } else {
        ((d / 0.125).floor() as usize).min(3)
    }
}

/// Item-level partition before unseen-annotator records are merged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemPartition {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    /// Items of each (post-merge) stratum, in corpus order.
    pub strata: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    /// Record indices into the corpus, ascending.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

const SPLIT_STREAM: u64 = 0x5350_4c49;

/// Groups items into disagreement strata and merges any stratum with fewer
/// than three items into a neighbour.
pub fn strata(corpus: &PerspectivistCorpus) -> Result<Vec<Vec<usize>>> {
    let votes = corpus.votes(None);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); NUM_STRATA];
    for (i, v) in votes.iter().enumerate() {
        let d = disagreement(v).map_err(|_| {
            Error::contract(format!("item `{}` has no records", corpus.items()[i].item_id))
        })?;
        bins[stratum_of(d)].push(i);
    }
    let mut bins: Vec<Vec<usize>> = bins.into_iter().filter(|b| !b.is_empty()).collect();
    while bins.len() > 1 {
        let Some(small) = bins.iter().position(|b| b.len() < 3) else {
            break;
        };
        let target = if small + 1 < bins.len() { small + 1 } else { small - 1 };
        log::warn!(
            "disagreement stratum with {} item(s) merged into a neighbour",
            bins[small].len()
        );
        let moved = bins.remove(small);
        let target = if target > small { target - 1 } else { target };
        bins[target].extend(moved);
        bins[target].sort_unstable();
    }
    Ok(bins)
}

pub fn split_items(
    corpus: &PerspectivistCorpus,
    seed: u64,
    ratios: SplitRatios,
) -> Result<ItemPartition> {
    let sum = ratios.train + ratios.dev + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.dev, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::contract(format!("split ratios must be non-negative and sum to 1, got {sum}")));
    }
    if corpus.items().is_empty() {
        return Err(Error::contract("cannot split an empty corpus"));
    }
    let strata = strata(corpus)?;
    let mut rng = rng_for(seed, &[SPLIT_STREAM]);
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for bucket in &strata {
        let mut shuffled = bucket.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
        let n_dev = ((n as f64 * ratios.dev).round() as usize).min(n - n_train);
        train.extend_from_slice(&shuffled[..n_train]);
        dev.extend_from_slice(&shuffled[n_train..n_train + n_dev]);
        test.extend_from_slice(&shuffled[n_train + n_dev..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    Ok(ItemPartition {
        train,
        dev,
        test,
        strata,
    })
}

/// Item-level stratified split followed by moving every dev/test record of an
/// annotator unseen in train into train.
pub fn stratified_split(
    corpus: &PerspectivistCorpus,
    seed: u64,
    ratios: SplitRatios,
) -> Result<SplitBundle> {
    let part = split_items(corpus, seed, ratios)?;
    let mut which = vec![0u8; corpus.items().len()];
    part.dev.iter().for_each(|&i| which[i] = 1);
    part.test.iter().for_each(|&i| which[i] = 2);

    let train_annotators: BTreeSet<usize> = corpus
        .dense()
        .iter()
        .filter(|r| which[r.item] == 0)
        .map(|r| r.annotator)
        .collect();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, r) in corpus.dense().iter().enumerate() {
        let slot = if train_annotators.contains(&r.annotator) {
            which[r.item]
        } else {
            0
        };
        match slot {
            0 => train.push(idx),
            1 => dev.push(idx),
            _ => test.push(idx),
        }
    }
    Ok(SplitBundle {
        train,
        dev,
        test,
        seed,
    })
}
