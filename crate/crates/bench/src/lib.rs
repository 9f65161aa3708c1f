//! Shared fixtures for the benchmarks.

use std::collections::HashMap;

use searchrel_core::corpus::{apply_engagement, PinDocument, QueryRecord};
use searchrel_core::features::{assemble_features, build_bm25_index, FeatureContext, FeatureLayout, StudentFeatureVector};
use searchrel_core::pipeline::synthetic::{generate_synthetic, SyntheticConfig};
use searchrel_core::student::{collect_categories, StudentConfig, StudentModel};
use searchrel_core::teacher::{CrossEncoderModel, TeacherConfig};
use searchrel_core::textrep::Vocabulary;

pub struct Fixture {
    pub queries: Vec<QueryRecord>,
    pub pins: Vec<PinDocument>,
    pub vocab: Vocabulary,
    pub ctx: FeatureContext,
    pub features: Vec<StudentFeatureVector>,
    pub student: StudentModel,
    pub teacher: CrossEncoderModel,
}

/// A small synthetic corpus with untrained models at their default sizes.
pub fn fixture() -> Fixture {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_queries: 200,
        n_pins: 2000,
        n_annotations: 2000,
        n_engagement_pairs: 5000,
        ..SyntheticConfig::default()
    })
    .expect("synthetic corpus");
    let mut pins = corpus.pins.clone();
    apply_engagement(&mut pins, &corpus.engagement);
    let vocab = Vocabulary::from_corpus(corpus.queries.iter().map(|q| q.text.as_str()), &pins);
    let qe: HashMap<_, _> = corpus
        .query_embeddings
        .iter()
        .map(|e| (e.id.clone(), e.vector.clone()))
        .collect();
    let ctx = FeatureContext::new(FeatureLayout::default(), build_bm25_index(&pins).expect("index"), qe);
    let features: Vec<_> = corpus
        .queries
        .iter()
        .zip(pins.iter().cycle())
        .map(|(q, p)| assemble_features(&ctx, q, p))
        .collect();
    let cfg = StudentConfig::default();
    let cats = collect_categories(&cfg.layout, features.iter());
    let student = StudentModel::init(cfg, cats, 1).expect("student");
    let teacher = CrossEncoderModel::init(vocab.len(), TeacherConfig::default(), 1);
    Fixture {
        queries: corpus.queries,
        pins,
        vocab,
        ctx,
        features,
        student,
        teacher,
    }
}
