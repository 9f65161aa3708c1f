use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use serde::Serialize;

use searchrel_core::corpus::{
    apply_engagement, load_annotations, load_embedding_store, load_engagement_log, load_pins,
    load_queries, partition_by_query, read_jsonl, write_jsonl, EmbeddingRecord, EngagementRecord,
    LabeledExample, PinStore, QueryStore, RaterAnnotation, SoftLabel,
};
use searchrel_core::evalmetrics::{render_table, EvalReport};
use searchrel_core::features::{build_bm25_index, Bm25Index, FeatureContext};
use searchrel_core::neuralcore::seeded_rng;
use searchrel_core::pipeline::synthetic::{generate_synthetic, TruthRecord};
use searchrel_core::pipeline::{
    build_test_set, distillation_pairs, eval_student, human_labels, label_pool, run_scaling_experiment,
    stratified_sample, teacher_examples, train_and_eval, Featurizer, SamplingSpec, ScalingConfig, ScalingRow,
    TestExample,
};
use searchrel_core::service::OnlineScorer;
use searchrel_core::student::{load_student, save_student, train_student};
use searchrel_core::teacher::{eval_teacher, train_teacher, Teacher};
use searchrel_core::textrep::Vocabulary;

use crate::config::PipelineConfig;

const QUERIES: &str = "queries.jsonl";
const PINS: &str = "pins.jsonl";
const ANNOTATIONS: &str = "annotations.jsonl";
const ENGAGEMENT: &str = "engagement.jsonl";
const QUERY_EMBEDDINGS: &str = "query_embeddings.jsonl";
const VOCAB: &str = "vocab.jsonl";

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// The ingested corpus.
pub struct Corpus {
    pub queries: QueryStore,
    pub pins: PinStore,
    pub annotations: Vec<RaterAnnotation>,
    pub engagement: Vec<EngagementRecord>,
    pub query_embeddings: HashMap<String, Vec<f64>>,
}

impl Corpus {
    pub fn load(cfg: &PipelineConfig) -> anyhow::Result<Self> {
        let dir = cfg.corpus_dir();
        let qe = dir.join(QUERY_EMBEDDINGS);
        Ok(Corpus {
            queries: QueryStore::new(load_queries(dir.join(QUERIES))?)?,
            pins: PinStore::new(load_pins(dir.join(PINS))?)?,
            annotations: load_annotations(dir.join(ANNOTATIONS))?,
            engagement: load_engagement_log(dir.join(ENGAGEMENT))?,
            query_embeddings: if qe.exists() {
                load_embedding_store(&qe, cfg.student.model.layout.query_embedding_dim)?
            } else {
                HashMap::new()
            },
        })
    }

    pub fn feature_context(&self, cfg: &PipelineConfig) -> anyhow::Result<FeatureContext> {
        let index = Bm25Index::load(cfg.index_path())?;
        Ok(FeatureContext::new(
            cfg.student.model.layout.clone(),
            index,
            self.query_embeddings.clone(),
        ))
    }

    /// Labels for every annotated pair: oracle levels when a truth file is
    /// given, rater aggregates otherwise.
    pub fn evaluation_labels(&self, truth: Option<&Path>) -> anyhow::Result<Vec<LabeledExample>> {
        let mut labels = human_labels(&self.annotations)?;
        if let Some(path) = truth {
            let records: Vec<TruthRecord> = read_jsonl(path)?;
            let map: HashMap<(String, String), u8> = records
                .into_iter()
                .map(|t| ((t.query_id, t.pin_id), t.level))
                .collect();
            for e in &mut labels {
                let level = map
                    .get(&(e.query_id.clone(), e.pin_id.clone()))
                    .with_context(|| format!("{}: no truth for ({}, {})", path.display(), e.query_id, e.pin_id))?;
                e.label = SoftLabel::one_hot(*level)?;
            }
        }
        Ok(labels)
    }
}

fn truth_path(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.truth_path.as_ref().map(|p| cfg.path(p)))
}

fn test_set(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    featurizer: &mut Featurizer<'_>,
    truth: Option<&Path>,
) -> anyhow::Result<Vec<TestExample>> {
    let labels = corpus.evaluation_labels(truth)?;
    let test = build_test_set(&labels, cfg.split(), featurizer)?;
    if test.is_empty() {
        bail!("the held-out split contains no annotated pairs");
    }
    Ok(test)
}

pub fn synth_gen(cfg: &PipelineConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| cfg.raw_dir());
    let corpus = generate_synthetic(&cfg.synthetic)?;
    corpus.write_to_dir(&out)?;
    println!(
        "wrote {} queries, {} pins, {} annotations, {} engagement records to {}",
        corpus.queries.len(),
        corpus.pins.len(),
        corpus.annotations.len(),
        corpus.engagement.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &PipelineConfig, raw: Option<PathBuf>) -> anyhow::Result<()> {
    let raw = raw.unwrap_or_else(|| cfg.raw_dir());
    let queries = load_queries(raw.join(QUERIES))?;
    let mut pins = load_pins(raw.join(PINS))?;
    let query_store = QueryStore::new(queries.clone())?;
    PinStore::new(pins.clone())?;
    let pin_ids: std::collections::HashSet<&str> = pins.iter().map(|p| p.pin_id.as_str()).collect();
    let known = |q: &str, p: &str| query_store.get(q).is_some() && pin_ids.contains(p);

    let annotations = load_annotations(raw.join(ANNOTATIONS))?;
    let n_ann = annotations.len();
    let annotations: Vec<_> = annotations.into_iter().filter(|a| known(&a.query_id, &a.pin_id)).collect();
    if annotations.len() < n_ann {
        log::warn!("dropped {} annotations with unknown ids", n_ann - annotations.len());
    }
    let engagement_path = raw.join(ENGAGEMENT);
    let engagement = if engagement_path.exists() {
        load_engagement_log(&engagement_path)?
    } else {
        Vec::new()
    };
    let n_eng = engagement.len();
    let engagement: Vec<_> = engagement.into_iter().filter(|r| known(&r.query_id, &r.pin_id)).collect();
    if engagement.len() < n_eng {
        log::warn!("dropped {} engagement records with unknown ids", n_eng - engagement.len());
    }
    drop(pin_ids);
    apply_engagement(&mut pins, &engagement);

    let dir = cfg.corpus_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_jsonl(dir.join(QUERIES), &queries)?;
    write_jsonl(dir.join(PINS), &pins)?;
    write_jsonl(dir.join(ANNOTATIONS), &annotations)?;
    write_jsonl(dir.join(ENGAGEMENT), &engagement)?;
    let qe = raw.join(QUERY_EMBEDDINGS);
    if qe.exists() {
        let store = load_embedding_store(&qe, cfg.student.model.layout.query_embedding_dim)?;
        let mut records: Vec<EmbeddingRecord> = store
            .into_iter()
            .map(|(id, vector)| EmbeddingRecord { id, vector })
            .collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        write_jsonl(dir.join(QUERY_EMBEDDINGS), &records)?;
    }
    let vocab = Vocabulary::from_corpus(queries.iter().map(|q| q.text.as_str()), &pins);
    vocab.save(dir.join(VOCAB))?;
    println!(
        "ingested {} queries, {} pins, {} annotations, {} engagement records; vocabulary {}",
        queries.len(),
        pins.len(),
        annotations.len(),
        engagement.len(),
        vocab.len()
    );
    Ok(())
}

pub fn build_index(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let pins = load_pins(cfg.corpus_dir().join(PINS))?;
    let index = build_bm25_index(&pins)?;
    let path = cfg.index_path();
    ensure_parent(&path)?;
    index.save(&path)?;
    println!("indexed {} pins into {}", index.n_docs, path.display());
    Ok(())
}

pub fn train_teacher_cmd(cfg: &PipelineConfig, truth: Option<PathBuf>) -> anyhow::Result<()> {
    let corpus = Corpus::load(cfg)?;
    let vocab = Vocabulary::load(cfg.corpus_dir().join(VOCAB))?;
    let split = cfg.split();
    let human = human_labels(&corpus.annotations)?;
    let train_pool: Vec<_> = human.into_iter().filter(|e| !split.is_test(&e.query_id)).collect();
    let (train, valid) = partition_by_query(
        train_pool,
        |e| e.query_id.as_str(),
        cfg.valid_fraction,
        cfg.stage_seed("teacher-valid"),
    );
    let tc = &cfg.teacher;
    let tr = teacher_examples(&train, &corpus.queries, &corpus.pins, &vocab, &tc.text)?;
    let va = teacher_examples(&valid, &corpus.queries, &corpus.pins, &vocab, &tc.text)?;
    log::info!("teacher: {} train, {} valid examples", tr.len(), va.len());
    let trained = train_teacher(&tr, &va, &vocab, tc)?;
    let teacher = Teacher {
        model: trained.model,
        vocab,
        text: tc.text.clone(),
    };
    teacher.save(cfg.teacher_dir(), trained.best_epoch, &trained.history)?;

    let truth = truth_path(cfg, truth);
    let test: Vec<_> = corpus
        .evaluation_labels(truth.as_deref())?
        .into_iter()
        .filter(|e| split.is_test(&e.query_id))
        .collect();
    let te = teacher_examples(&test, &corpus.queries, &corpus.pins, &teacher.vocab, &tc.text)?;
    let report = eval_teacher(&teacher.model, &te)?;
    write_json(&cfg.reports_dir().join("teacher_eval.json"), &report)?;
    println!("{}", render_table(&[("teacher".into(), report)]));
    Ok(())
}

pub fn distill_label(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let corpus = Corpus::load(cfg)?;
    let (teacher, _) = Teacher::load(cfg.teacher_dir())?;
    let pairs = distillation_pairs(&corpus.engagement, &corpus.annotations, cfg.split());
    let out = label_pool(&teacher, &pairs, &corpus.queries, &corpus.pins)?;
    let path = cfg.labels_path();
    ensure_parent(&path)?;
    write_jsonl(&path, &out.examples)?;
    write_jsonl(path.with_file_name("skipped.jsonl"), &out.skipped)?;
    println!(
        "labeled {} pairs ({} skipped) into {}",
        out.examples.len(),
        out.skipped.len(),
        path.display()
    );
    Ok(())
}

pub fn sample(
    cfg: &PipelineConfig,
    size: Option<usize>,
    labels: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let labels = labels.unwrap_or_else(|| cfg.labels_path());
    let out = out.unwrap_or_else(|| cfg.sample_path());
    let pool: Vec<LabeledExample> = read_jsonl(&labels)?;
    let spec = SamplingSpec::uniform(size.unwrap_or(cfg.sample_size), cfg.stage_seed("sample"));
    let (chosen, report) = stratified_sample(&pool, &spec)?;
    ensure_parent(&out)?;
    write_jsonl(&out, &chosen)?;
    write_json(&cfg.reports_dir().join("sample.json"), &report)?;
    println!(
        "sampled {} of {} examples; per level {:?}, shortfall {:?}",
        chosen.len(),
        pool.len(),
        report.histogram,
        report.shortfall
    );
    Ok(())
}

pub fn train_student_cmd(cfg: &PipelineConfig, labels: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let labels = labels.unwrap_or_else(|| cfg.sample_path());
    let out = out.unwrap_or_else(|| cfg.student_path());
    let corpus = Corpus::load(cfg)?;
    let ctx = corpus.feature_context(cfg)?;
    let mut fz = Featurizer::new(&ctx, &corpus.queries, &corpus.pins);
    let examples: Vec<LabeledExample> = read_jsonl(&labels)?;
    let split = cfg.split();
    if let Some(e) = examples.iter().find(|e| split.is_test(&e.query_id)) {
        bail!("{}: example for held-out query `{}`", labels.display(), e.query_id);
    }
    let featurized = fz.labeled(&examples)?;
    let items: Vec<(String, _)> = examples.into_iter().map(|e| e.query_id).zip(featurized).collect();
    let (train, valid) = partition_by_query(items, |(q, _)| q.as_str(), cfg.valid_fraction, cfg.stage_seed("student-valid"));
    let train: Vec<_> = train.into_iter().map(|(_, x)| x).collect();
    let valid: Vec<_> = valid.into_iter().map(|(_, x)| x).collect();
    let trained = train_student(&train, &valid, &cfg.student)?;
    ensure_parent(&out)?;
    save_student(&trained.model, &trained.history, &out)?;
    println!(
        "trained student on {} examples (best epoch {}) into {}",
        train.len(),
        trained.best_epoch,
        out.display()
    );
    Ok(())
}

pub fn eval(
    cfg: &PipelineConfig,
    student: Option<PathBuf>,
    truth: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<EvalReport> {
    let student = student.unwrap_or_else(|| cfg.student_path());
    let out = out.unwrap_or_else(|| cfg.reports_dir().join("eval.json"));
    let model = load_student(&student, Some(&cfg.student.model.layout))
        .with_context(|| format!("loading student checkpoint {}", student.display()))?;
    let corpus = Corpus::load(cfg)?;
    let ctx = corpus.feature_context(cfg)?;
    let mut fz = Featurizer::new(&ctx, &corpus.queries, &corpus.pins);
    let truth = truth_path(cfg, truth);
    let test = test_set(cfg, &corpus, &mut fz, truth.as_deref())?;
    let report = eval_student(&model, &test)?;
    write_json(&out, &report)?;
    println!("{}", render_table(&[("student".into(), report.clone())]));
    Ok(report)
}

pub fn scale_report(
    cfg: &PipelineConfig,
    sizes: Option<Vec<usize>>,
    labels: Option<PathBuf>,
    truth: Option<PathBuf>,
) -> anyhow::Result<()> {
    let labels = labels.unwrap_or_else(|| cfg.labels_path());
    let corpus = Corpus::load(cfg)?;
    let ctx = corpus.feature_context(cfg)?;
    let mut fz = Featurizer::new(&ctx, &corpus.queries, &corpus.pins);
    let truth = truth_path(cfg, truth);
    let test = test_set(cfg, &corpus, &mut fz, truth.as_deref())?;

    let pool_examples: Vec<LabeledExample> = read_jsonl(&labels)?;
    let features = fz.labeled(&pool_examples)?;
    let pool: Vec<_> = pool_examples
        .into_iter()
        .zip(features)
        .map(|(e, (fv, _))| (e, fv))
        .collect();
    let scaling = ScalingConfig {
        sizes: sizes.unwrap_or_else(|| cfg.sizes.clone()),
        student: cfg.student.clone(),
        sample_seed: cfg.stage_seed("sample"),
        valid_fraction: cfg.valid_fraction,
        valid_seed: cfg.stage_seed("student-valid"),
    };

    let split = cfg.split();
    let mut baseline: Vec<_> = corpus
        .evaluation_labels(truth.as_deref())?
        .into_iter()
        .filter(|e| !split.is_test(&e.query_id))
        .collect();
    baseline.shuffle(&mut seeded_rng(cfg.stage_seed("baseline")));
    baseline.truncate(cfg.baseline_size);
    let base_features = fz.labeled(&baseline)?;
    let base_items = baseline.iter().map(|e| e.query_id.clone()).zip(base_features).collect();
    let (_, base_report, base_n) = train_and_eval(base_items, &test, &scaling)?;

    let mut report = run_scaling_experiment(&pool, &test, &scaling)?;
    report.rows.insert(
        0,
        ScalingRow {
            label: format!("human {}", baseline.len()),
            size: baseline.len(),
            n_train: base_n,
            shortfall: [0; 5],
            report: base_report,
        },
    );
    let dir = cfg.reports_dir();
    write_json(&dir.join("scaling.json"), &report)?;
    let table = render_table(
        &report
            .rows
            .iter()
            .map(|r| (r.label.clone(), r.report.clone()))
            .collect::<Vec<_>>(),
    );
    std::fs::write(dir.join("scaling.txt"), &table).context("writing scaling table")?;
    println!("{table}");
    Ok(())
}

pub fn serve(cfg: &PipelineConfig, listen: Option<String>) -> anyhow::Result<()> {
    let mut service = cfg.resolved_service();
    if let Some(l) = listen {
        service.listen = l;
    }
    let scorer = Arc::new(OnlineScorer::load(&service)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&service.listen)
            .await
            .with_context(|| format!("binding {}", service.listen))?;
        println!("listening on {}", listener.local_addr()?);
        let app = crate::server::router(scorer, service.timeout());
        crate::server::serve(listener, app).await?;
        Ok(())
    })
}
