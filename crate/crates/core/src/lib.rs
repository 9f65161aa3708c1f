//! Query-pin search relevance: a cross-encoder teacher trained on soft rater
//! labels, a feed-forward student distilled from teacher labels, the feature
//! and text pipelines both depend on, offline metrics and an online scorer.

pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod hash;
pub mod neuralcore;
pub mod pipeline;
pub mod service;
pub mod student;
pub mod teacher;
pub mod textrep;

pub use corpus::{
    EngagementRecord, LabelSource, LabeledExample, PinDocument, PinStore, QueryRecord,
    QueryStore, RaterAnnotation, SoftLabel, NUM_LEVELS,
};
pub use error::{Error, Result};
