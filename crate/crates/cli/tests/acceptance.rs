//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line and
//! then asserts. Tests share one synthetic corpus and teacher and run one at
//! a time so that timing and latency figures are not distorted.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use searchrel_core::corpus::{
    apply_engagement, write_jsonl, EmbeddingRecord, LabelSource, LabeledExample, PinDocument, PinStore,
    QueryStore, SoftLabel,
};
use searchrel_core::evalmetrics::{auroc, ndcg_at_k, precision_at_k};
use searchrel_core::features::{
    bm25_score, build_bm25_index, overlap_fraction, FeatureContext, FeatureLayout, DEFAULT_B, DEFAULT_K1,
};
use searchrel_core::neuralcore::{grad_check, softmax, Parameters, SoftClassifier};
use searchrel_core::pipeline::synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus};
use searchrel_core::pipeline::{
    build_test_set, distillation_pairs, human_labels, label_pool, run_scaling_experiment, stratified_indices,
    teacher_examples, train_and_eval, Featurizer, HoldoutSplit, SamplingSpec, ScalingConfig, TestExample,
};
use searchrel_core::service::{OnlineScorer, ScoreRequest, ScoreResponse, ServiceConfig};
use searchrel_core::student::{
    collect_categories, save_student, student_forward, StudentConfig, StudentModel, StudentTrainConfig,
};
use searchrel_core::teacher::{
    teacher_forward, train_teacher, CrossEncoderModel, Teacher, TeacherConfig, TeacherTrainConfig,
};
use searchrel_core::textrep::{encode_pair, tokenize, Field, TextRepConfig, Vocabulary};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    // Written to the raw handle so the line survives libtest's capture.
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

const TEST_FRACTION: f64 = 0.2;
const SPLIT_SEED: u64 = 7;

struct World {
    corpus: SyntheticCorpus,
    queries: QueryStore,
    pins: PinStore,
    vocab: Vocabulary,
    split: HoldoutSplit,
    /// Rater-aggregated labels on training queries.
    human_train: Vec<LabeledExample>,
    /// Oracle one-hot labels for every annotated pair.
    truth: Vec<LabeledExample>,
    ctx: FeatureContext,
    built_in: Duration,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let t0 = Instant::now();
        let corpus = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let mut pins = corpus.pins.clone();
        apply_engagement(&mut pins, &corpus.engagement);
        let vocab = Vocabulary::from_corpus(corpus.queries.iter().map(|q| q.text.as_str()), &pins);
        let split = HoldoutSplit {
            test_fraction: TEST_FRACTION,
            seed: SPLIT_SEED,
        };
        let human_train = human_labels(&corpus.annotations)
            .unwrap()
            .into_iter()
            .filter(|e| !split.is_test(&e.query_id))
            .collect();
        let oracle = corpus.oracle();
        let truth = corpus
            .annotations
            .iter()
            .map(|a| LabeledExample {
                query_id: a.query_id.clone(),
                pin_id: a.pin_id.clone(),
                label: SoftLabel::one_hot(oracle[&(a.query_id.clone(), a.pin_id.clone())]).unwrap(),
                source: LabelSource::Human,
            })
            .collect();
        let qe: HashMap<String, Vec<f64>> = corpus
            .query_embeddings
            .iter()
            .map(|e| (e.id.clone(), e.vector.clone()))
            .collect();
        let ctx = FeatureContext::new(FeatureLayout::default(), build_bm25_index(&pins).unwrap(), qe);
        World {
            queries: QueryStore::new(corpus.queries.clone()).unwrap(),
            pins: PinStore::new(pins).unwrap(),
            corpus,
            vocab,
            split,
            human_train,
            truth,
            ctx,
            built_in: t0.elapsed(),
        }
    })
}

/// Trains a teacher on training-query rater labels and returns it with its
/// oracle accuracy on held-out annotated pairs.
fn train_and_score_teacher(w: &World, text: TextRepConfig) -> (Teacher, f64) {
    let cfg = TeacherTrainConfig {
        text,
        ..TeacherTrainConfig::default()
    };
    let (train, valid) = searchrel_core::corpus::split_by_query(w.human_train.clone(), 0.1, 8);
    let tr = teacher_examples(&train, &w.queries, &w.pins, &w.vocab, &cfg.text).unwrap();
    let va = teacher_examples(&valid, &w.queries, &w.pins, &w.vocab, &cfg.text).unwrap();
    let trained = train_teacher(&tr, &va, &w.vocab, &cfg).unwrap();
    let teacher = Teacher {
        model: trained.model,
        vocab: w.vocab.clone(),
        text: cfg.text,
    };
    let mut hits = 0usize;
    let mut n = 0usize;
    for e in w.truth.iter().filter(|e| w.split.is_test(&e.query_id)) {
        let q = w.queries.get(&e.query_id).unwrap();
        let p = w.pins.get(&e.pin_id).unwrap();
        let seq = encode_pair(&q.text, p, &teacher.vocab, &teacher.text).unwrap();
        let probs = teacher_forward(&teacher.model, &seq).unwrap();
        let pred = (0..5).max_by(|&a, &b| probs.probs()[a].total_cmp(&probs.probs()[b]).then(b.cmp(&a))).unwrap();
        let truth = e.label.probs().iter().position(|&x| x == 1.0).unwrap();
        hits += usize::from(pred == truth);
        n += 1;
    }
    (teacher, hits as f64 / n as f64)
}

struct TrainedTeacherResult {
    teacher: Teacher,
    accuracy: f64,
    elapsed: Duration,
}

fn full_teacher() -> &'static TrainedTeacherResult {
    static T: OnceLock<TrainedTeacherResult> = OnceLock::new();
    T.get_or_init(|| {
        let w = world();
        let t0 = Instant::now();
        let (teacher, accuracy) = train_and_score_teacher(w, TextRepConfig::default());
        TrainedTeacherResult {
            teacher,
            accuracy,
            elapsed: w.built_in + t0.elapsed(),
        }
    })
}

fn test_examples(w: &World, fz: &mut Featurizer<'_>) -> Vec<TestExample> {
    build_test_set(&w.truth, w.split, fz).unwrap()
}

/// `n` oracle-labeled training annotations, shuffled under a fixed seed.
fn truth_baseline(w: &World, n: usize) -> Vec<LabeledExample> {
    let mut base: Vec<_> = w.truth.iter().filter(|e| !w.split.is_test(&e.query_id)).cloned().collect();
    base.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    base.truncate(n);
    base
}

fn scaling_config(sizes: Vec<usize>) -> ScalingConfig {
    ScalingConfig {
        sizes,
        student: StudentTrainConfig::default(),
        sample_seed: 3,
        valid_fraction: 0.1,
        valid_seed: 9,
    }
}

// ---------------------------------------------------------------- criterion 1

fn random_label(rng: &mut ChaCha8Rng) -> SoftLabel {
    let raw: [f64; 5] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    SoftLabel::new(softmax(&raw)).unwrap()
}

#[test]
fn criterion_1_gradient_check() {
    let _g = serial();
    let t0 = Instant::now();
    let h = 1e-5;
    let probes = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // Teacher at its default size over a small random batch.
    let v = 80u32;
    let teacher = CrossEncoderModel::init(v as usize, TeacherConfig::default(), 1);
    let seqs: Vec<_> = (0..6)
        .map(|_| {
            let len = rng.random_range(4..30);
            let cut = rng.random_range(1..len);
            searchrel_core::textrep::TokenSeq {
                tokens: (0..len).map(|_| rng.random_range(0..v)).collect(),
                segment_ids: (0..len).map(|i| u8::from(i >= cut)).collect(),
            }
        })
        .collect();
    let labels: Vec<_> = (0..6).map(|_| random_label(&mut rng)).collect();
    let batch: Vec<_> = seqs.iter().zip(&labels).collect();
    let mut tg = teacher.zeroed();
    teacher.accumulate_gradients(&batch, &mut tg).unwrap();
    let t_report = grad_check(
        &teacher,
        &tg,
        |m: &CrossEncoderModel| m.accumulate_gradients(&batch, &mut m.zeroed()).unwrap(),
        h,
        probes,
        2,
    );

    // Student at its default size on random feature vectors.
    let layout = FeatureLayout::default();
    let fvs: Vec<_> = (0..6)
        .map(|i| {
            let mut pin = PinDocument::new(format!("p{i}"));
            pin.title = "red dress".into();
            pin.synthetic_caption = "a dress".into();
            pin.pin_embedding = Some((0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
            pin.categorical_attrs.insert("category".into(), format!("c{}", i % 3));
            pin.categorical_attrs.insert("locale".into(), "en".into());
            pin.engagement_rate.insert("q".into(), rng.random_range(0.0..1.0));
            let mut fv = searchrel_core::features::assemble_features(
                &FeatureContext::new(layout.clone(), build_bm25_index(&[pin.clone()]).unwrap(), HashMap::new()),
                &searchrel_core::corpus::QueryRecord::new("q", "red dress"),
                &pin,
            );
            fv.query_embedding = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            fv.bm25 = fv.bm25.iter().map(|_| rng.random_range(0.0..3.0)).collect();
            fv
        })
        .collect();
    let cfg = StudentConfig::default();
    let cats = collect_categories(&cfg.layout, fvs.iter());
    let student = StudentModel::init(cfg, cats, 3).unwrap();
    let labels: Vec<_> = (0..6).map(|_| random_label(&mut rng)).collect();
    let batch: Vec<_> = fvs.iter().zip(&labels).collect();
    let mut sg = student.zeroed();
    student.accumulate_gradients(&batch, &mut sg).unwrap();
    let s_report = grad_check(
        &student,
        &sg,
        |m: &StudentModel| m.accumulate_gradients(&batch, &mut m.zeroed()).unwrap(),
        h,
        probes,
        4,
    );

    let elapsed = t0.elapsed();
    let worst = t_report.max_rel_error.max(s_report.max_rel_error);
    let pass = t_report.probes >= 100
        && s_report.probes >= 100
        && worst < 1e-4
        && elapsed < Duration::from_secs(60);
    verdict(
        1,
        pass,
        &format!(
            "teacher max rel err {:.2e} ({} probes), student {:.2e} ({} probes), {:.1}s",
            t_report.max_rel_error,
            t_report.probes,
            s_report.max_rel_error,
            s_report.probes,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{t_report:?} {s_report:?}");
}

// ---------------------------------------------------------------- criterion 2

fn brute_auroc(scores: &[f64], pos: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn direct_ndcg(levels: &[u8], k: usize) -> f64 {
    let gain = |l: u8| 0.25 * f64::from(l - 1);
    let dcg: f64 = levels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| gain(l) / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / ideal
}

fn direct_precision(levels: &[u8], k: usize) -> f64 {
    levels.iter().take(k).map(|&l| 0.25 * f64::from(l - 1)).sum::<f64>() / k as f64
}

#[test]
fn criterion_2_metric_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(2..=200);
        let distinct = rng.random_range(1..=n.min(20));
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..distinct as u32)) * 0.37).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if pos.iter().all(|&p| p) || pos.iter().all(|&p| !p) {
            continue;
        }
        worst = worst.max((auroc(&scores, &pos).unwrap() - brute_auroc(&scores, &pos)).abs());
        instances += 1;
    }
    let ndcg_hand = ndcg_at_k(&[5, 3], 2).unwrap();
    let p_hand = precision_at_k(&[5, 4, 3, 2, 1, 1, 1, 1], 8).unwrap();
    let mut formula_err = 0.0f64;
    for _ in 0..200 {
        let len = rng.random_range(1..12);
        let levels: Vec<u8> = (0..len).map(|_| rng.random_range(1..=5)).collect();
        for k in 1..=len {
            formula_err = formula_err
                .max((ndcg_at_k(&levels, k).unwrap() - direct_ndcg(&levels, k)).abs())
                .max((precision_at_k(&levels, k).unwrap() - direct_precision(&levels, k)).abs());
        }
    }
    let pass = worst <= 1e-12
        && (ndcg_hand - 0.80657).abs() < 5e-6
        && (p_hand - 0.3125).abs() < 1e-12
        && formula_err < 1e-12;
    verdict(
        2,
        pass,
        &format!(
            "auroc max err {worst:.1e} over {instances}, ndcg [5,3]@2 = {ndcg_hand:.5}, p@8 = {p_hand}, formula err {formula_err:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_teacher_learnability() {
    let _g = serial();
    let t = full_teacher();
    let pass = t.accuracy >= 0.90 && t.elapsed < Duration::from_secs(600);
    verdict(
        3,
        pass,
        &format!(
            "held-out oracle accuracy {:.4}, {:.0}s including corpus generation",
            t.accuracy,
            t.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_distillation_scaling() {
    let _g = serial();
    let w = world();
    let t = full_teacher();
    let t0 = Instant::now();
    let pairs = distillation_pairs(&w.corpus.engagement, &w.corpus.annotations, w.split);
    let labeled = label_pool(&t.teacher, &pairs, &w.queries, &w.pins).unwrap();
    let mut fz = Featurizer::new(&w.ctx, &w.queries, &w.pins);
    let test = test_examples(w, &mut fz);
    let pool: Vec<_> = labeled
        .examples
        .into_iter()
        .map(|e| {
            let fv = fz.features(&e.query_id, &e.pin_id).unwrap();
            (e, fv)
        })
        .collect();
    let cfg = scaling_config(vec![10_000, 50_000, 150_000]);
    let base = truth_baseline(w, 5_000);
    let base_items = base
        .iter()
        .map(|e| (e.query_id.clone(), (fz.features(&e.query_id, &e.pin_id).unwrap(), e.label)))
        .collect();
    let (_, base_report, _) = train_and_eval(base_items, &test, &cfg).unwrap();
    let report = run_scaling_experiment(&pool, &test, &cfg).unwrap();
    let accs: Vec<f64> = report.rows.iter().map(|r| r.report.accuracy).collect();
    let elapsed = t.elapsed + t0.elapsed();
    let monotone = accs.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let margin = accs[2] - base_report.accuracy;
    let pass = monotone && margin >= 0.02 && elapsed < Duration::from_secs(1200);
    verdict(
        4,
        pass,
        &format!(
            "distilled 10k/50k/150k accuracy {:.4}/{:.4}/{:.4}, human 5k {:.4} (margin {:+.4}), pool {}, {:.0}s",
            accs[0],
            accs[1],
            accs[2],
            base_report.accuracy,
            margin,
            pool.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_stratified_sampler() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut failures = Vec::new();
    let mut exact_quota_cases = 0;
    let mut shortfall_cases = 0;
    for case in 0..500 {
        let n = rng.random_range(1..1500);
        let skew: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let labels: Vec<SoftLabel> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    random_label(&mut rng)
                } else {
                    let total: f64 = skew.iter().sum();
                    let mut u = rng.random_range(0.0..total);
                    let mut level = 5u8;
                    for (i, s) in skew.iter().enumerate() {
                        if u < *s {
                            level = i as u8 + 1;
                            break;
                        }
                        u -= s;
                    }
                    SoftLabel::one_hot(level).unwrap()
                }
            })
            .collect();
        let raw: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..1.0) + 1e-3);
        let sum: f64 = raw.iter().sum();
        let spec = SamplingSpec {
            target_total: if case % 2 == 0 {
                rng.random_range(1..=(n / 3).max(1))
            } else {
                rng.random_range(1..2000)
            },
            target_distribution: raw.map(|x| x / sum),
            seed: rng.random(),
        };
        // Oracle: strata from a direct argmax with ties to the lowest level.
        let mut available = [0usize; 5];
        let stratum = |l: &SoftLabel| {
            let p = l.probs();
            let mut best = 0;
            for k in 1..5 {
                if p[k] > p[best] {
                    best = k;
                }
            }
            best
        };
        for l in &labels {
            available[stratum(l)] += 1;
        }
        let quotas: [usize; 5] = spec.target_distribution.map(|f| (spec.target_total as f64 * f).round() as usize);
        let (idx, report) = stratified_indices(&labels, &spec).unwrap();
        let (idx2, report2) = stratified_indices(&labels, &spec).unwrap();
        let bytes = |i: &Vec<usize>, r| serde_json::to_vec(&(i, r)).unwrap();
        let mut hist = [0usize; 5];
        for &i in &idx {
            hist[stratum(&labels[i])] += 1;
        }
        let unique = idx.iter().collect::<HashSet<_>>().len() == idx.len();
        let mut ok = unique && idx.iter().all(|&i| i < n) && bytes(&idx, &report) == bytes(&idx2, &report2);
        for c in 0..5 {
            let want = quotas[c].min(available[c]);
            ok &= hist[c] == want && report.histogram[c] == want;
            ok &= report.shortfall[c] == quotas[c].saturating_sub(available[c]);
            ok &= report.quotas[c] == quotas[c];
        }
        if (0..5).all(|c| available[c] >= quotas[c]) {
            exact_quota_cases += 1;
        } else {
            shortfall_cases += 1;
        }
        if !ok {
            failures.push(case);
        }
    }
    let pass = failures.is_empty();
    verdict(
        5,
        pass,
        &format!(
            "500 pools ({exact_quota_cases} with full quotas, {shortfall_cases} with shortfall), failures {failures:?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_text_feature_ablation() {
    let _g = serial();
    let w = world();
    let t0 = Instant::now();
    // caption; + title and description; + link title and description;
    // + board titles; + engaged query tokens
    let mut accs = Vec::new();
    for n_fields in [1, 3, 5, 6] {
        let text = TextRepConfig {
            field_order: Field::ALL[..n_fields].to_vec(),
            ..TextRepConfig::default()
        };
        accs.push(train_and_score_teacher(w, text).1);
    }
    accs.push(full_teacher().accuracy);
    let pass = accs.windows(2).all(|p| p[1] >= p[0] - 0.01);
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
    verdict(
        6,
        pass,
        &format!(
            "accuracy by added family {}, {:.0}s",
            shown.join(" -> "),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

fn save_service_artifacts(dir: &Path, model: &StudentModel, w: &World) -> ServiceConfig {
    let cfg = ServiceConfig {
        student_path: dir.join("student.json"),
        index_path: dir.join("index.json"),
        pins_path: dir.join("pins.jsonl"),
        query_embeddings_path: Some(dir.join("qe.jsonl")),
        ..ServiceConfig::default()
    };
    save_student(model, &[], &cfg.student_path).unwrap();
    w.ctx.index.save(&cfg.index_path).unwrap();
    write_jsonl(&cfg.pins_path, w.pins.as_slice()).unwrap();
    let qe: Vec<EmbeddingRecord> = w.corpus.query_embeddings.clone();
    write_jsonl(cfg.query_embeddings_path.as_ref().unwrap(), &qe).unwrap();
    cfg
}

#[test]
fn criterion_7_online_offline_parity_and_latency() {
    let _g = serial();
    let w = world();
    let mut fz = Featurizer::new(&w.ctx, &w.queries, &w.pins);
    let test = test_examples(w, &mut fz);
    let base = truth_baseline(w, 5_000);
    let items = base
        .iter()
        .map(|e| (e.query_id.clone(), (fz.features(&e.query_id, &e.pin_id).unwrap(), e.label)))
        .collect();
    let (model, _, _) = train_and_eval(items, &test, &scaling_config(vec![5_000])).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = save_service_artifacts(dir.path(), &model, w);
    let parity_addr = common::spawn_server(Arc::new(OnlineScorer::load(&cfg).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let queries = w.queries.as_slice();
    let pins = w.pins.as_slice();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..1000 {
        let q = &queries[rng.random_range(0..queries.len())];
        let p = &pins[rng.random_range(0..pins.len())];
        let req = ScoreRequest {
            query_text: q.text.clone(),
            query_id: Some(q.query_id.clone()),
            pin_ids: vec![p.pin_id.clone()],
        };
        let (status, body) = common::http(parity_addr, "POST", "/v1/score", Some(&serde_json::to_string(&req).unwrap()));
        let resp: Option<ScoreResponse> = serde_json::from_str(&body).ok();
        let Some(resp) = resp.filter(|r| status == 200 && r.results.len() == 1) else {
            failures += 1;
            continue;
        };
        let offline = student_forward(&model, &fz.features(&q.query_id, &p.pin_id).unwrap()).unwrap();
        for k in 0..5 {
            worst = worst.max((resp.results[0].probs[k] - offline.probs()[k]).abs());
        }
    }

    let latency_scorer = Arc::new(OnlineScorer::load(&cfg).unwrap());
    let latency_addr = common::spawn_server(latency_scorer.clone());
    for _ in 0..300 {
        let q = &queries[rng.random_range(0..queries.len())];
        let req = ScoreRequest {
            query_text: q.text.clone(),
            query_id: Some(q.query_id.clone()),
            pin_ids: (0..100).map(|_| pins[rng.random_range(0..pins.len())].pin_id.clone()).collect(),
        };
        let (status, _) = common::http(latency_addr, "POST", "/v1/score", Some(&serde_json::to_string(&req).unwrap()));
        assert_eq!(status, 200);
    }
    let (_, stats_body) = common::http(latency_addr, "GET", "/stats", None);
    let stats: serde_json::Value = serde_json::from_str(&stats_body).unwrap();
    let p50 = stats["latency_p50_ms"].as_f64().unwrap();
    let p99 = stats["latency_p99_ms"].as_f64().unwrap();
    let pass = failures == 0 && worst <= 1e-9 && p99 < 50.0 && p50 <= p99 && stats["requests"] == 300;
    verdict(
        7,
        pass,
        &format!("1000 requests, max |dprob| {worst:.1e}, {failures} failures; batch-of-100 handler p50 {p50:.2} ms, p99 {p99:.2} ms"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

fn run_cli(config: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_searchrel"))
        .arg("--config")
        .arg(config)
        .args(["--seed", "5"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn cli_pipeline(work: &Path) -> Vec<u8> {
    let config = work.join("config.json");
    let cfg = serde_json::json!({
        "work_dir": work,
        "synthetic": {"n_queries": 500, "n_pins": 3000, "n_annotations": 10000, "n_engagement_pairs": 30000},
        "teacher": {"train": {"epochs": 40}},
        "student": {"train": {"epochs": 10}},
        "sample_size": 4000,
        "truth_path": "raw/truth.jsonl"
    });
    std::fs::write(&config, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    for stage in [
        "synth-gen",
        "ingest",
        "build-index",
        "train-teacher",
        "distill-label",
        "sample",
        "train-student",
        "eval",
    ] {
        run_cli(&config, &[stage]);
    }
    std::fs::read(work.join("reports/eval.json")).unwrap()
}

#[test]
fn criterion_8_cli_determinism() {
    let _g = serial();
    let t0 = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cli_pipeline(a.path());
    let rb = cli_pipeline(b.path());
    let report: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&ra).unwrap();
    let pass = ra == rb;
    verdict(
        8,
        pass,
        &format!(
            "two runs, {} byte EvalReports identical: {pass}; accuracy {}, {:.0}s",
            ra.len(),
            report["accuracy"],
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

fn direct_bm25(query: &[String], doc: &[String], corpus: &[Vec<String>]) -> f64 {
    let n = corpus.len() as f64;
    let avgdl = corpus.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: HashSet<&String> = query.iter().collect();
    let mut s = 0.0;
    for t in terms {
        let df = corpus.iter().filter(|d| d.contains(t)).count() as f64;
        let tf = doc.iter().filter(|x| *x == t).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let norm = if avgdl > 0.0 {
            1.0 - DEFAULT_B + DEFAULT_B * doc.len() as f64 / avgdl
        } else {
            1.0
        };
        s += idf * tf * (DEFAULT_K1 + 1.0) / (tf + DEFAULT_K1 * norm);
    }
    s
}

fn direct_overlap(query: &[String], field: &[String]) -> f64 {
    let q: HashSet<&String> = query.iter().collect();
    if q.is_empty() {
        return 0.0;
    }
    let f: HashSet<&String> = field.iter().collect();
    q.iter().filter(|t| f.contains(*t)).count() as f64 / q.len() as f64
}

#[test]
fn criterion_9_bm25_and_overlap() {
    let _g = serial();
    let mut d1 = PinDocument::new("d1");
    d1.title = "red dress".into();
    let mut d2 = PinDocument::new("d2");
    d2.title = "blue shoes".into();
    let idx = build_bm25_index(&[d1, d2]).unwrap();
    let hand = bm25_score(&idx, Field::Title, &tokenize("red"), &tokenize("red dress"));
    let hand_ok = (hand - 2f64.ln()).abs() < 1e-9;
    let overlap_hand = overlap_fraction(&tokenize("red summer dress"), &tokenize("a red dress"));
    let overlap_ok = (overlap_hand - 2.0 / 3.0).abs() < 1e-9;

    let words = ["red", "blue", "dress", "shoes", "summer", "linen", "boho", "oak"];
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let pick = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<String> {
        (0..rng.random_range(lo..hi)).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let (mut oracle_err, mut violations) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let docs: Vec<Vec<String>> = (0..rng.random_range(1..8)).map(|_| pick(&mut rng, 0, 7)).collect();
        let pins: Vec<PinDocument> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut p = PinDocument::new(format!("p{i}"));
                p.title = d.join(" ");
                p
            })
            .collect();
        let idx = build_bm25_index(&pins).unwrap();
        let q = pick(&mut rng, 0, 4);
        for d in &docs {
            let s = bm25_score(&idx, Field::Title, &q, d);
            oracle_err = oracle_err.max((s - direct_bm25(&q, d, &docs)).abs());
            violations += usize::from(s < 0.0 || !s.is_finite());
            let o = overlap_fraction(&q, d);
            oracle_err = oracle_err.max((o - direct_overlap(&q, d)).abs());
            violations += usize::from(!(0.0..=1.0).contains(&o));
            // swapping a non-query token for a query token raises tf at fixed length
            if let (Some(t), Some(pos)) = (q.first(), d.iter().position(|x| !q.contains(x))) {
                let mut more = d.clone();
                more[pos] = t.clone();
                violations += usize::from(bm25_score(&idx, Field::Title, &q, &more) < s);
                violations += usize::from(overlap_fraction(&q, &more) < o);
            }
        }
    }
    let pass = hand_ok && overlap_ok && oracle_err < 1e-9 && violations == 0;
    verdict(
        9,
        pass,
        &format!(
            "two-document bm25 {hand:.6}, overlap {overlap_hand:.6}; 1000 random instances max oracle err {oracle_err:.1e}, {violations} property violations"
        ),
    );
    assert!(pass);
}
