//! Corpus data model: pins, queries, rater annotations and soft labels, with
//! JSONL ingestion and deterministic query-level train/test splitting.
//!
//! All files are UTF-8 JSONL, one record per line. Blank lines are ignored.
//! Errors carry the 1-based line number of the offending record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{fmix64, Fnv1a};

/// Number of relevance levels (L1..L5).
pub const NUM_LEVELS: usize = 5;

/// A content item with its text fields, optional precomputed embedding and
/// side attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PinDocument {
    pub pin_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub link_title: String,
    #[serde(default)]
    pub link_description: String,
    #[serde(default)]
    pub synthetic_caption: String,
    #[serde(default)]
    pub board_titles: Vec<String>,
    #[serde(default)]
    pub engaged_query_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pin_embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub categorical_attrs: BTreeMap<String, String>,
    /// Historical engagement rate keyed by query id, each in `[0, 1]`.
    #[serde(default)]
    pub engagement_rate: BTreeMap<String, f64>,
}

impl PinDocument {
    pub fn new(pin_id: impl Into<String>) -> Self {
        PinDocument {
            pin_id: pin_id.into(),
            ..Default::default()
        }
    }

    fn normalize(&mut self) -> Result<()> {
        if self.pin_id.trim().is_empty() {
            return Err(Error::Validation("pin_id must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        self.engaged_query_tokens.retain(|t| seen.insert(t.clone()));
        for (qid, rate) in &self.engagement_rate {
            if !(0.0..=1.0).contains(rate) {
                return Err(Error::Validation(format!(
                    "pin {}: engagement rate {rate} for query {qid} outside [0, 1]",
                    self.pin_id
                )));
            }
        }
        if let Some(e) = &self.pin_embedding {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("pin {} embedding", self.pin_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embedding: Option<Vec<f64>>,
}

impl QueryRecord {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        QueryRecord {
            query_id: query_id.into(),
            text: text.into(),
            query_embedding: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.query_id.trim().is_empty() {
            return Err(Error::Validation("query_id must be non-empty".into()));
        }
        if self.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "query {} has empty text",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterAnnotation {
    pub query_id: String,
    pub pin_id: String,
    pub ratings: Vec<u8>,
}

/// A probability distribution over the five relevance levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_LEVELS]", into = "[f64; NUM_LEVELS]")]
pub struct SoftLabel([f64; NUM_LEVELS]);

impl SoftLabel {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: [f64; NUM_LEVELS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(format!(
                "soft label entries must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Validation(format!(
                "soft label must sum to 1 (got {sum})"
            )));
        }
        Ok(SoftLabel(probs))
    }

    /// Builds a label from a softmax output without re-validating the sum.
    pub(crate) fn from_softmax(probs: [f64; NUM_LEVELS]) -> Self {
        SoftLabel(probs)
    }

    /// One-hot label at `level` (1-based).
    pub fn one_hot(level: u8) -> Result<Self> {
        let idx = level_index(level)?;
        let mut p = [0.0; NUM_LEVELS];
        p[idx] = 1.0;
        Ok(SoftLabel(p))
    }

    pub fn uniform() -> Self {
        SoftLabel([1.0 / NUM_LEVELS as f64; NUM_LEVELS])
    }

    pub fn probs(&self) -> &[f64; NUM_LEVELS] {
        &self.0
    }

    /// Most probable level (1-based); ties go to the lowest level.
    pub fn argmax_level(&self) -> u8 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u8 + 1
    }

    /// Expected gain `Σ p_c · 0.25 (c − 1)`.
    pub fn expected_gain(&self) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, p)| p * 0.25 * i as f64)
            .sum()
    }
}

impl TryFrom<[f64; NUM_LEVELS]> for SoftLabel {
    type Error = Error;

    fn try_from(value: [f64; NUM_LEVELS]) -> Result<Self> {
        SoftLabel::new(value)
    }
}

impl From<SoftLabel> for [f64; NUM_LEVELS] {
    fn from(value: SoftLabel) -> Self {
        value.0
    }
}

pub(crate) fn level_index(level: u8) -> Result<usize> {
    if (1..=NUM_LEVELS as u8).contains(&level) {
        Ok(level as usize - 1)
    } else {
        Err(Error::Validation(format!(
            "relevance level {level} outside 1..=5"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Human,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query_id: String,
    pub pin_id: String,
    pub label: SoftLabel,
    pub source: LabelSource,
}

/// One row of the search engagement log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub query_id: String,
    pub pin_id: String,
    pub repins: u64,
    pub long_clicks: u64,
    pub impressions: u64,
}

impl EngagementRecord {
    /// High-quality engagements (repins plus long clicks) per impression,
    /// clamped to `[0, 1]`; `None` without impressions.
    pub fn rate(&self) -> Option<f64> {
        if self.impressions == 0 {
            return None;
        }
        let engaged = (self.repins + self.long_clicks) as f64;
        Some((engaged / self.impressions as f64).min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Mean of the one-hot vectors of the individual ratings.
pub fn aggregate_soft_label(ann: &RaterAnnotation) -> Result<SoftLabel> {
    if ann.ratings.is_empty() {
        return Err(Error::Empty(format!(
            "annotation ({}, {}) has no ratings",
            ann.query_id, ann.pin_id
        )));
    }
    let mut counts = [0u32; NUM_LEVELS];
    for &r in &ann.ratings {
        counts[level_index(r)?] += 1;
    }
    let n = ann.ratings.len() as f64;
    Ok(SoftLabel(counts.map(|c| f64::from(c) / n)))
}

/// Position of `query_id` in `[0, 1)` under the seeded split hash.
///
/// The hash is FNV-1a 64 over the seed as 8 little-endian bytes followed by
/// the UTF-8 bytes of the query id, passed through the MurmurHash3 `fmix64`
/// finalizer; the top 53 bits are scaled to `[0, 1)`. For example
/// `("q1", 0)` hashes to `0x044858d44e10bc39`, i.e. 0.016728927452336673.
pub fn split_unit(query_id: &str, seed: u64) -> f64 {
    let h = fmix64(
        Fnv1a::new()
            .write(&seed.to_le_bytes())
            .write(query_id.as_bytes())
            .finish(),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn query_in_test(query_id: &str, test_fraction: f64, seed: u64) -> bool {
    split_unit(query_id, seed) < test_fraction
}

/// Partitions examples into `(train, test)` so that every query lands wholly
/// on one side. Order within each side follows the input.
pub fn split_by_query(
    examples: Vec<LabeledExample>,
    test_fraction: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    partition_by_query(examples, |e| e.query_id.as_str(), test_fraction, seed)
}

/// [`split_by_query`] for any record type that carries a query id.
pub fn partition_by_query<T, F>(
    items: Vec<T>,
    query_id: F,
    test_fraction: f64,
    seed: u64,
) -> (Vec<T>, Vec<T>)
where
    F: Fn(&T) -> &str,
{
    let mut cache: HashMap<String, bool> = HashMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for item in items {
        let qid = query_id(&item);
        let in_test = match cache.get(qid) {
            Some(&v) => v,
            None => {
                let v = query_in_test(qid, test_fraction, seed);
                cache.insert(qid.to_owned(), v);
                v
            }
        };
        if in_test {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    (train, test)
}

/// Reads a JSONL file into records of type `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`read_jsonl`], pairing each record with its 1-based line number.
fn read_jsonl_numbered<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<(usize, T)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: impl AsRef<Path>, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Validation(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn with_line<T>(path: &Path, line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::DuplicateId(_) | Error::Dimension { .. } => e,
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: other.to_string(),
        },
    })
}

pub fn load_pins(path: impl AsRef<Path>) -> Result<Vec<PinDocument>> {
    let path = path.as_ref();
    let records: Vec<(usize, PinDocument)> = read_jsonl_numbered(path)?;
    let mut seen = HashSet::new();
    let mut pins = Vec::with_capacity(records.len());
    for (line, mut pin) in records {
        with_line(path, line, pin.normalize())?;
        if !seen.insert(pin.pin_id.clone()) {
            return Err(Error::DuplicateId(pin.pin_id));
        }
        pins.push(pin);
    }
    Ok(pins)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let records: Vec<(usize, QueryRecord)> = read_jsonl_numbered(path)?;
    let mut seen = HashSet::new();
    for (line, q) in &records {
        with_line(path, *line, q.validate())?;
        if !seen.insert(q.query_id.as_str()) {
            return Err(Error::DuplicateId(q.query_id.clone()));
        }
    }
    Ok(records.into_iter().map(|(_, q)| q).collect())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<RaterAnnotation>> {
    let path = path.as_ref();
    let records: Vec<(usize, RaterAnnotation)> = read_jsonl_numbered(path)?;
    for (line, a) in &records {
        with_line(path, *line, aggregate_soft_label(a).map(|_| ()))?;
    }
    Ok(records.into_iter().map(|(_, a)| a).collect())
}

pub fn load_engagement_log(path: impl AsRef<Path>) -> Result<Vec<EngagementRecord>> {
    read_jsonl(path)
}

pub fn load_embedding_store(
    path: impl AsRef<Path>,
    expected_dim: usize,
) -> Result<HashMap<String, Vec<f64>>> {
    let records: Vec<EmbeddingRecord> = read_jsonl(path)?;
    let mut store = HashMap::with_capacity(records.len());
    for rec in records {
        if rec.vector.len() != expected_dim {
            return Err(Error::Dimension {
                id: rec.id,
                expected: expected_dim,
                actual: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {}", rec.id)));
        }
        if store.contains_key(&rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        store.insert(rec.id, rec.vector);
    }
    Ok(store)
}

/// Folds the engagement log into each pin's `engagement_rate` map. Records
/// for the same pair are summed before the rate is taken; unknown pins are
/// ignored.
pub fn apply_engagement(pins: &mut [PinDocument], log: &[EngagementRecord]) {
    let mut totals: HashMap<(&str, &str), (u64, u64, u64)> = HashMap::new();
    for r in log {
        let t = totals
            .entry((r.pin_id.as_str(), r.query_id.as_str()))
            .or_default();
        t.0 += r.repins;
        t.1 += r.long_clicks;
        t.2 += r.impressions;
    }
    for pin in pins.iter_mut() {
        pin.engagement_rate.clear();
    }
    let index: HashMap<&str, usize> = pins
        .iter()
        .enumerate()
        .map(|(i, p)| (p.pin_id.as_str(), i))
        .collect();
    let mut updates: Vec<(usize, String, f64)> = Vec::new();
    for ((pin_id, query_id), (repins, long_clicks, impressions)) in totals {
        let Some(&i) = index.get(pin_id) else { continue };
        let rec = EngagementRecord {
            query_id: query_id.to_owned(),
            pin_id: pin_id.to_owned(),
            repins,
            long_clicks,
            impressions,
        };
        if let Some(rate) = rec.rate() {
            updates.push((i, rec.query_id, rate));
        }
    }
    for (i, qid, rate) in updates {
        pins[i].engagement_rate.insert(qid, rate);
    }
}

/// Id-indexed, immutable collection of pins.
#[derive(Debug, Clone, Default)]
pub struct PinStore {
    pins: Vec<PinDocument>,
    index: HashMap<String, usize>,
}

impl PinStore {
    pub fn new(pins: Vec<PinDocument>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pins.len());
        for (i, p) in pins.iter().enumerate() {
            if index.insert(p.pin_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.pin_id.clone()));
            }
        }
        Ok(PinStore { pins, index })
    }

    pub fn get(&self, pin_id: &str) -> Option<&PinDocument> {
        self.index.get(pin_id).map(|&i| &self.pins[i])
    }

    pub fn as_slice(&self) -> &[PinDocument] {
        &self.pins
    }

    pub fn len(&self) -> usize {
        self.pins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pins.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct QueryStore {
    queries: Vec<QueryRecord>,
    index: HashMap<String, usize>,
}

impl QueryStore {
    pub fn new(queries: Vec<QueryRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if index.insert(q.query_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.query_id.clone()));
            }
        }
        Ok(QueryStore { queries, index })
    }

    pub fn get(&self, query_id: &str) -> Option<&QueryRecord> {
        self.index.get(query_id).map(|&i| &self.queries[i])
    }

    pub fn as_slice(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}
