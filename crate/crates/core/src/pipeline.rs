//! Distillation orchestration: pseudo-label logged pairs with a teacher,
//! draw a class-balanced sample, featurize, and measure how student quality
//! scales with the number of distilled labels.

pub mod synthetic;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    aggregate_soft_label, EngagementRecord, LabelSource, LabeledExample, PinStore, QueryRecord,
    QueryStore, RaterAnnotation, SoftLabel, NUM_LEVELS,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{build_report, ranked_lists, EvalReport, RankItem, ScoredExample};
use crate::features::{assemble_features_from_tokens, pin_field_tokens, FeatureContext, StudentFeatureVector};
use crate::hash::Fnv1a;
use crate::neuralcore::seeded_rng;
use crate::student::{student_forward, train_student, StudentModel, StudentTrainConfig};
use crate::teacher::TeacherScorer;
use crate::textrep::{encode_pair, tokenize, TextRepConfig, TokenSeq, Vocabulary};

/// A logged query-pin pair awaiting a teacher label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledPair {
    pub query_id: String,
    pub pin_id: String,
    /// High-quality engagements logged for the pair.
    pub weight: u64,
}

/// One pair per distinct (query, pin) in the log, in order of first
/// appearance, weighted by summed repins and long clicks.
pub fn unlabeled_pairs(log: &[EngagementRecord]) -> Vec<UnlabeledPair> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<UnlabeledPair> = Vec::new();
    for r in log {
        let key = (r.query_id.as_str(), r.pin_id.as_str());
        let w = r.repins + r.long_clicks;
        match index.get(&key) {
            Some(&i) => out[i].weight += w,
            None => {
                index.insert(key, out.len());
                out.push(UnlabeledPair {
                    query_id: r.query_id.clone(),
                    pin_id: r.pin_id.clone(),
                    weight: w,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub query_id: String,
    pub pin_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelPoolOutput {
    pub examples: Vec<LabeledExample>,
    pub skipped: Vec<SkippedPair>,
}

/// Labels every resolvable pair with `scorer`, preserving input order.
/// Pairs whose ids do not resolve are skipped and reported.
pub fn label_pool(
    scorer: &dyn TeacherScorer,
    pairs: &[UnlabeledPair],
    queries: &QueryStore,
    pins: &PinStore,
) -> Result<LabelPoolOutput> {
    let mut out = LabelPoolOutput::default();
    for pair in pairs {
        let (Some(q), Some(p)) = (queries.get(&pair.query_id), pins.get(&pair.pin_id)) else {
            let reason = if queries.get(&pair.query_id).is_none() {
                format!("unknown query `{}`", pair.query_id)
            } else {
                format!("unknown pin `{}`", pair.pin_id)
            };
            log::warn!("skipping pair: {reason}");
            out.skipped.push(SkippedPair {
                query_id: pair.query_id.clone(),
                pin_id: pair.pin_id.clone(),
                reason,
            });
            continue;
        };
        out.examples.push(LabeledExample {
            query_id: pair.query_id.clone(),
            pin_id: pair.pin_id.clone(),
            label: scorer.score(q, p)?,
            source: LabelSource::Teacher,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub target_total: usize,
    pub target_distribution: [f64; NUM_LEVELS],
    pub seed: u64,
}

impl SamplingSpec {
    pub fn uniform(target_total: usize, seed: u64) -> Self {
        SamplingSpec {
            target_total,
            target_distribution: [1.0 / NUM_LEVELS as f64; NUM_LEVELS],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_total == 0 {
            return Err(Error::Validation("target_total must be positive".into()));
        }
        let d = &self.target_distribution;
        if d.iter().any(|p| !p.is_finite() || *p < 0.0) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "target distribution {d:?} must sum to 1"
            )));
        }
        Ok(())
    }

    /// `round(target_total × fraction)` per level.
    pub fn quotas(&self) -> [usize; NUM_LEVELS] {
        self.target_distribution
            .map(|f| (self.target_total as f64 * f).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub quotas: [usize; NUM_LEVELS],
    pub histogram: [usize; NUM_LEVELS],
    /// Quota minus available examples, for levels that ran short.
    pub shortfall: [usize; NUM_LEVELS],
}

/// Pool indices chosen by stratified sampling, in ascending order.
///
/// An example's stratum is its argmax level (ties to the lowest). Each
/// stratum contributes `quota` examples drawn without replacement, or all of
/// its examples when it holds fewer; the missing count is reported and not
/// redistributed.
pub fn stratified_indices(labels: &[SoftLabel], spec: &SamplingSpec) -> Result<(Vec<usize>, SampleReport)> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("sampling pool".into()));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); NUM_LEVELS];
    for (i, l) in labels.iter().enumerate() {
        strata[l.argmax_level() as usize - 1].push(i);
    }
    let quotas = spec.quotas();
    let mut rng = seeded_rng(spec.seed);
    let mut chosen = Vec::new();
    let mut histogram = [0; NUM_LEVELS];
    let mut shortfall = [0; NUM_LEVELS];
    for (c, stratum) in strata.iter().enumerate() {
        let q = quotas[c];
        if stratum.len() <= q {
            shortfall[c] = q - stratum.len();
            chosen.extend_from_slice(stratum);
            histogram[c] = stratum.len();
        } else {
            let picks = rand::seq::index::sample(&mut rng, stratum.len(), q);
            chosen.extend(picks.iter().map(|k| stratum[k]));
            histogram[c] = q;
        }
    }
    chosen.sort_unstable();
    Ok((
        chosen,
        SampleReport {
            quotas,
            histogram,
            shortfall,
        },
    ))
}

pub fn stratified_sample(
    pool: &[LabeledExample],
    spec: &SamplingSpec,
) -> Result<(Vec<LabeledExample>, SampleReport)> {
    let labels: Vec<SoftLabel> = pool.iter().map(|e| e.label).collect();
    let (idx, report) = stratified_indices(&labels, spec)?;
    Ok((idx.into_iter().map(|i| pool[i].clone()).collect(), report))
}

/// Rater-aggregated soft labels for every annotation.
pub fn human_labels(annotations: &[RaterAnnotation]) -> Result<Vec<LabeledExample>> {
    annotations
        .iter()
        .map(|a| {
            Ok(LabeledExample {
                query_id: a.query_id.clone(),
                pin_id: a.pin_id.clone(),
                label: aggregate_soft_label(a)?,
                source: LabelSource::Human,
            })
        })
        .collect()
}

fn resolve<'a>(
    queries: &'a QueryStore,
    pins: &'a PinStore,
    query_id: &str,
    pin_id: &str,
) -> Result<(&'a QueryRecord, &'a crate::corpus::PinDocument)> {
    let q = queries
        .get(query_id)
        .ok_or_else(|| Error::Validation(format!("unknown query `{query_id}`")))?;
    let p = pins
        .get(pin_id)
        .ok_or_else(|| Error::Validation(format!("unknown pin `{pin_id}`")))?;
    Ok((q, p))
}

/// Teacher training pairs for labeled examples.
pub fn teacher_examples(
    examples: &[LabeledExample],
    queries: &QueryStore,
    pins: &PinStore,
    vocab: &Vocabulary,
    text: &TextRepConfig,
) -> Result<Vec<(TokenSeq, SoftLabel)>> {
    examples
        .iter()
        .map(|e| {
            let (q, p) = resolve(queries, pins, &e.query_id, &e.pin_id)?;
            Ok((encode_pair(&q.text, p, vocab, text)?, e.label))
        })
        .collect()
}

/// Bulk feature assembly that tokenizes each query and pin once.
pub struct Featurizer<'a> {
    ctx: &'a FeatureContext,
    queries: &'a QueryStore,
    pins: &'a PinStore,
    query_tokens: HashMap<String, Vec<String>>,
    pin_tokens: HashMap<String, Vec<Vec<String>>>,
}

impl<'a> Featurizer<'a> {
    pub fn new(ctx: &'a FeatureContext, queries: &'a QueryStore, pins: &'a PinStore) -> Self {
        Featurizer {
            ctx,
            queries,
            pins,
            query_tokens: HashMap::new(),
            pin_tokens: HashMap::new(),
        }
    }

    pub fn features(&mut self, query_id: &str, pin_id: &str) -> Result<StudentFeatureVector> {
        let (q, p) = resolve(self.queries, self.pins, query_id, pin_id)?;
        let qt = self
            .query_tokens
            .entry(query_id.to_string())
            .or_insert_with(|| tokenize(&q.text));
        let pt = self
            .pin_tokens
            .entry(pin_id.to_string())
            .or_insert_with(|| pin_field_tokens(p));
        Ok(assemble_features_from_tokens(self.ctx, q, qt, p, pt))
    }

    pub fn labeled(&mut self, examples: &[LabeledExample]) -> Result<Vec<(StudentFeatureVector, SoftLabel)>> {
        examples
            .iter()
            .map(|e| Ok((self.features(&e.query_id, &e.pin_id)?, e.label)))
            .collect()
    }
}

/// Query-level held-out split shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub test_fraction: f64,
    pub seed: u64,
}

impl HoldoutSplit {
    pub fn is_test(&self, query_id: &str) -> bool {
        crate::corpus::query_in_test(query_id, self.test_fraction, self.seed)
    }
}

/// Logged pairs on training queries that carry no human annotation.
pub fn distillation_pairs(
    log: &[EngagementRecord],
    annotations: &[RaterAnnotation],
    split: HoldoutSplit,
) -> Vec<UnlabeledPair> {
    let annotated: HashSet<(&str, &str)> = annotations
        .iter()
        .map(|a| (a.query_id.as_str(), a.pin_id.as_str()))
        .collect();
    unlabeled_pairs(log)
        .into_iter()
        .filter(|p| {
            !split.is_test(&p.query_id) && !annotated.contains(&(p.query_id.as_str(), p.pin_id.as_str()))
        })
        .collect()
}

/// A fixed evaluation example: features plus the true label.
#[derive(Debug, Clone, PartialEq)]
pub struct TestExample {
    pub query_id: String,
    pub pin_id: String,
    pub features: StudentFeatureVector,
    pub truth: SoftLabel,
}

/// FNV-1a over ids and label bits, identifying a test set.
pub fn test_set_hash(test: &[TestExample]) -> u64 {
    let mut h = Fnv1a::new();
    for t in test {
        h.write(t.query_id.as_bytes()).write(&[0]);
        h.write(t.pin_id.as_bytes()).write(&[0]);
        for p in t.truth.probs() {
            h.write(&p.to_bits().to_le_bytes());
        }
    }
    h.finish()
}

/// Featurized test examples for the labeled pairs on held-out queries.
pub fn build_test_set(
    labeled: &[LabeledExample],
    split: HoldoutSplit,
    featurizer: &mut Featurizer<'_>,
) -> Result<Vec<TestExample>> {
    labeled
        .iter()
        .filter(|e| split.is_test(&e.query_id))
        .map(|e| {
            Ok(TestExample {
                query_id: e.query_id.clone(),
                pin_id: e.pin_id.clone(),
                features: featurizer.features(&e.query_id, &e.pin_id)?,
                truth: e.label,
            })
        })
        .collect()
}

/// Ranking cutoffs reported alongside accuracy and AUROC.
pub const REPORT_KS: [usize; 2] = [4, 8];

/// Scores `test` with a student and builds the full report, ranking each
/// query's pins by expected gain.
pub fn eval_student(model: &StudentModel, test: &[TestExample]) -> Result<EvalReport> {
    let mut scored = Vec::with_capacity(test.len());
    let mut items = Vec::with_capacity(test.len());
    for t in test {
        let predicted = student_forward(model, &t.features)?;
        items.push(RankItem {
            query_id: t.query_id.clone(),
            item_id: t.pin_id.clone(),
            score: predicted.expected_gain(),
            level: t.truth.argmax_level(),
        });
        scored.push(ScoredExample {
            predicted,
            truth: t.truth,
        });
    }
    build_report(&scored, &ranked_lists(&items), &REPORT_KS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub label: String,
    pub size: usize,
    pub n_train: usize,
    pub shortfall: [usize; NUM_LEVELS],
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub test_set_hash: u64,
    pub rows: Vec<ScalingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub student: StudentTrainConfig,
    pub sample_seed: u64,
    /// Fraction of each sampled set's queries held out for early stopping.
    pub valid_fraction: f64,
    pub valid_seed: u64,
}

/// Splits `(query_id, item)` pairs by query into train and validation.
fn split_valid<T>(items: Vec<(String, T)>, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let (train, valid) = crate::corpus::partition_by_query(items, |(q, _)| q.as_str(), fraction, seed);
    (
        train.into_iter().map(|(_, t)| t).collect(),
        valid.into_iter().map(|(_, t)| t).collect(),
    )
}

/// Trains on `labeled` (after a query-level validation split) and evaluates
/// on `test`.
pub fn train_and_eval(
    labeled: Vec<(String, (StudentFeatureVector, SoftLabel))>,
    test: &[TestExample],
    config: &ScalingConfig,
) -> Result<(StudentModel, EvalReport, usize)> {
    let (train, valid) = split_valid(labeled, config.valid_fraction, config.valid_seed);
    let n_train = train.len();
    let trained = train_student(&train, &valid, &config.student)?;
    let report = eval_student(&trained.model, test)?;
    Ok((trained.model, report, n_train))
}

/// For each size: stratified sample of the pool, train a student, evaluate on
/// the fixed test set.
pub fn run_scaling_experiment(
    pool: &[(LabeledExample, StudentFeatureVector)],
    test: &[TestExample],
    config: &ScalingConfig,
) -> Result<ScalingReport> {
    if config.sizes.is_empty() {
        return Err(Error::Validation("no sizes requested".into()));
    }
    if config.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "sizes {:?} must be strictly ascending",
            config.sizes
        )));
    }
    let labels: Vec<SoftLabel> = pool.iter().map(|(e, _)| e.label).collect();
    let hash = test_set_hash(test);
    let mut rows = Vec::new();
    for &size in &config.sizes {
        if pool.len() < size {
            return Err(Error::Insufficient(format!(
                "pool of {} examples cannot supply size {size}",
                pool.len()
            )));
        }
        let (idx, sample) = stratified_indices(&labels, &SamplingSpec::uniform(size, config.sample_seed))?;
        let labeled = idx
            .into_iter()
            .map(|i| {
                let (e, fv) = &pool[i];
                (e.query_id.clone(), (fv.clone(), e.label))
            })
            .collect();
        let (_, report, n_train) = train_and_eval(labeled, test, config)?;
        log::info!("size {size}: accuracy {:.4}", report.accuracy);
        debug_assert_eq!(test_set_hash(test), hash);
        rows.push(ScalingRow {
            label: format!("distilled {size}"),
            size,
            n_train,
            shortfall: sample.shortfall,
            report,
        });
    }
    Ok(ScalingReport {
        test_set_hash: hash,
        rows,
    })
}
