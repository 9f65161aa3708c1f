//! Student features: per-field BM25 and token overlap, the historical
//! engagement rate, optional query and pin embeddings, categorical
//! attributes and presence flags.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PinDocument, QueryRecord};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::textrep::{field_tokens, tokenize, Field};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Document statistics of one field family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub field: Field,
    /// Token lengths summed over documents divided by `n_docs`; 0 when the
    /// field is empty everywhere.
    pub avgdl: f64,
    pub df: BTreeMap<String, u32>,
}

/// Okapi BM25 statistics for every field family.
///
/// Serialized as JSON:
/// `{"k1":1.2,"b":0.75,"n_docs":N,"fields":[{"field":"title","avgdl":..,"df":{"red":1,..}},..]}`
/// with fields in [`Field::ALL`] order and `df` keys sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    pub n_docs: u32,
    pub fields: Vec<FieldStats>,
}

/// Field token lists of one pin, indexed by [`Field::index`].
pub fn pin_field_tokens(pin: &PinDocument) -> Vec<Vec<String>> {
    Field::ALL.iter().map(|&f| field_tokens(pin, f)).collect()
}

pub fn build_bm25_index(pins: &[PinDocument]) -> Result<Bm25Index> {
    build_bm25_index_with(pins, DEFAULT_K1, DEFAULT_B)
}

pub fn build_bm25_index_with(pins: &[PinDocument], k1: f64, b: f64) -> Result<Bm25Index> {
    if pins.is_empty() {
        return Err(Error::Empty("cannot index an empty corpus".into()));
    }
    let n = pins.len();
    let mut stats: Vec<(usize, BTreeMap<String, u32>)> =
        Field::ALL.iter().map(|_| (0, BTreeMap::new())).collect();
    for pin in pins {
        for (fi, toks) in pin_field_tokens(pin).into_iter().enumerate() {
            stats[fi].0 += toks.len();
            let unique: HashSet<String> = toks.into_iter().collect();
            for t in unique {
                *stats[fi].1.entry(t).or_insert(0) += 1;
            }
        }
    }
    Ok(Bm25Index {
        k1,
        b,
        n_docs: n as u32,
        fields: Field::ALL
            .iter()
            .zip(stats)
            .map(|(&field, (total, df))| FieldStats {
                field,
                avgdl: total as f64 / n as f64,
                df,
            })
            .collect(),
    })
}

impl Bm25Index {
    fn stats(&self, field: Field) -> &FieldStats {
        &self.fields[field.index()]
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, field: Field, token: &str) -> f64 {
        let df = f64::from(self.stats(field).df.get(token).copied().unwrap_or(0));
        let n = f64::from(self.n_docs);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("index serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let idx: Bm25Index = serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if idx.n_docs == 0 || idx.fields.len() != Field::ALL.len() {
            return Err(Error::Validation(format!(
                "{}: index must cover {} fields over at least one document",
                path.display(),
                Field::ALL.len()
            )));
        }
        for (fs, &f) in idx.fields.iter().zip(Field::ALL.iter()) {
            if fs.field != f {
                return Err(Error::Validation(format!(
                    "{}: field {} out of order",
                    path.display(),
                    fs.field.name()
                )));
            }
        }
        Ok(idx)
    }
}

/// Sum over unique query tokens of
/// `idf · tf (k1 + 1) / (tf + k1 (1 − b + b · dl / avgdl))`.
/// Zero when the field is empty across the whole corpus.
pub fn bm25_score(index: &Bm25Index, field: Field, query: &[String], doc: &[String]) -> f64 {
    let avgdl = index.stats(field).avgdl;
    if avgdl <= 0.0 || doc.is_empty() {
        return 0.0;
    }
    let dl = doc.len() as f64;
    let norm = index.k1 * (1.0 - index.b + index.b * dl / avgdl);
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for t in query {
        if !seen.insert(t.as_str()) {
            continue;
        }
        let tf = doc.iter().filter(|d| *d == t).count() as f64;
        if tf > 0.0 {
            score += index.idf(field, t) * tf * (index.k1 + 1.0) / (tf + norm);
        }
    }
    score
}

/// `|unique(query) ∩ unique(field)| / |unique(query)|`, 0 for an empty query.
pub fn overlap_fraction(query: &[String], field: &[String]) -> f64 {
    let q: HashSet<&str> = query.iter().map(String::as_str).collect();
    if q.is_empty() {
        return 0.0;
    }
    let f: HashSet<&str> = field.iter().map(String::as_str).collect();
    q.intersection(&f).count() as f64 / q.len() as f64
}

/// Linear embedding of a scalar: `x · w + v`.
pub fn numerical_embed(x: f64, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if w.len() != v.len() {
        return Err(Error::Shape(format!(
            "numerical embedding weight has {} entries, bias {}",
            w.len(),
            v.len()
        )));
    }
    Ok(w.iter().zip(v).map(|(wi, vi)| x * wi + vi).collect())
}

/// Which groups a feature vector carries, and in what order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureLayout {
    pub query_embedding_dim: usize,
    pub pin_embedding_dim: usize,
    pub fields: Vec<Field>,
    pub categorical_attrs: Vec<String>,
}

pub const NUM_FLAGS: usize = 3;

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout {
            query_embedding_dim: 16,
            pin_embedding_dim: 16,
            fields: Field::ALL.to_vec(),
            categorical_attrs: vec!["category".into(), "locale".into()],
        }
    }
}

impl FeatureLayout {
    /// BM25 per field, overlap per field, then the engagement rate.
    pub fn num_scalars(&self) -> usize {
        2 * self.fields.len() + 1
    }

    pub fn scalar_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .fields
            .iter()
            .map(|f| format!("bm25_{}", f.name()))
            .collect();
        names.extend(self.fields.iter().map(|f| format!("overlap_{}", f.name())));
        names.push("engagement_rate".into());
        names
    }

    /// FNV-1a over the canonical JSON encoding of the layout.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("layout serializes");
        Fnv1a::new().write(json.as_bytes()).finish()
    }
}

/// Features of one (query, pin) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentFeatureVector {
    pub layout_hash: u64,
    pub query_embedding: Vec<f64>,
    pub pin_embedding: Vec<f64>,
    pub bm25: Vec<f64>,
    pub overlap: Vec<f64>,
    pub engagement_rate: f64,
    /// Query embedding, pin embedding and engagement record present.
    pub flags: [f64; NUM_FLAGS],
    /// One value per layout categorical attribute; empty when missing.
    pub categorical: Vec<String>,
}

impl StudentFeatureVector {
    /// Scalars in [`FeatureLayout::scalar_names`] order.
    pub fn scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.bm25
            .iter()
            .chain(self.overlap.iter())
            .copied()
            .chain(std::iter::once(self.engagement_rate))
    }
}

/// Everything `assemble_features` reads besides the pair itself.
#[derive(Debug, Clone)]
pub struct FeatureContext {
    pub layout: FeatureLayout,
    pub layout_hash: u64,
    pub index: Bm25Index,
    /// Query embeddings keyed by query id, used when the query record does
    /// not carry its own.
    pub query_embeddings: HashMap<String, Vec<f64>>,
}

impl FeatureContext {
    pub fn new(
        layout: FeatureLayout,
        index: Bm25Index,
        query_embeddings: HashMap<String, Vec<f64>>,
    ) -> Self {
        FeatureContext {
            layout_hash: layout.hash(),
            layout,
            index,
            query_embeddings,
        }
    }
}

fn embedding_or_zero(v: Option<&Vec<f64>>, dim: usize) -> (Vec<f64>, f64) {
    match v {
        Some(e) if e.len() == dim && e.iter().all(|x| x.is_finite()) => (e.clone(), 1.0),
        _ => (vec![0.0; dim], 0.0),
    }
}

/// Total, deterministic feature assembly. Missing or malformed embeddings
/// become zero vectors with flag 0; a missing engagement rate becomes 0.
pub fn assemble_features(
    ctx: &FeatureContext,
    query: &QueryRecord,
    pin: &PinDocument,
) -> StudentFeatureVector {
    let pin_tokens = pin_field_tokens(pin);
    assemble_features_from_tokens(ctx, query, &tokenize(&query.text), pin, &pin_tokens)
}

/// [`assemble_features`] with the query and pin already tokenized, for bulk
/// extraction. `pin_tokens` must come from [`pin_field_tokens`].
pub fn assemble_features_from_tokens(
    ctx: &FeatureContext,
    query: &QueryRecord,
    query_tokens: &[String],
    pin: &PinDocument,
    pin_tokens: &[Vec<String>],
) -> StudentFeatureVector {
    let layout = &ctx.layout;
    let q_emb_src = query
        .query_embedding
        .as_ref()
        .or_else(|| ctx.query_embeddings.get(&query.query_id));
    let (query_embedding, q_flag) = embedding_or_zero(q_emb_src, layout.query_embedding_dim);
    let (pin_embedding, p_flag) =
        embedding_or_zero(pin.pin_embedding.as_ref(), layout.pin_embedding_dim);
    let mut bm25 = Vec::with_capacity(layout.fields.len());
    let mut overlap = Vec::with_capacity(layout.fields.len());
    for &f in &layout.fields {
        let doc = &pin_tokens[f.index()];
        bm25.push(bm25_score(&ctx.index, f, query_tokens, doc));
        overlap.push(overlap_fraction(query_tokens, doc));
    }
    let rate = pin
        .engagement_rate
        .get(&query.query_id)
        .copied()
        .filter(|r| r.is_finite());
    let categorical = layout
        .categorical_attrs
        .iter()
        .map(|a| pin.categorical_attrs.get(a).cloned().unwrap_or_default())
        .collect();
    StudentFeatureVector {
        layout_hash: ctx.layout_hash,
        query_embedding,
        pin_embedding,
        bm25,
        overlap,
        engagement_rate: rate.unwrap_or(0.0),
        flags: [q_flag, p_flag, if rate.is_some() { 1.0 } else { 0.0 }],
        categorical,
    }
}
