use std::collections::HashMap;

use searchrel_core::corpus::{apply_engagement, split_by_query, PinStore, QueryStore};
use searchrel_core::features::{build_bm25_index, FeatureContext, FeatureLayout};
use searchrel_core::neuralcore::TrainConfig;
use searchrel_core::pipeline::synthetic::{generate_synthetic, SyntheticConfig};
use searchrel_core::pipeline::{
    build_test_set, distillation_pairs, human_labels, label_pool, stratified_sample, teacher_examples,
    train_and_eval, Featurizer, HoldoutSplit, SamplingSpec, ScalingConfig,
};
use searchrel_core::student::{load_student, save_student, student_forward, StudentTrainConfig};
use searchrel_core::teacher::{train_teacher, Teacher, TeacherTrainConfig};
use searchrel_core::textrep::Vocabulary;
use searchrel_core::evalmetrics::EvalReport;

fn run(seed: u64) -> (EvalReport, Vec<[f64; 5]>, tempfile::TempDir) {
    let corpus = generate_synthetic(&SyntheticConfig {
        seed,
        n_queries: 150,
        n_pins: 600,
        n_annotations: 2500,
        n_engagement_pairs: 5000,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut pins = corpus.pins.clone();
    apply_engagement(&mut pins, &corpus.engagement);
    let vocab = Vocabulary::from_corpus(corpus.queries.iter().map(|q| q.text.as_str()), &pins);
    let queries = QueryStore::new(corpus.queries.clone()).unwrap();
    let pins = PinStore::new(pins).unwrap();
    let split = HoldoutSplit { test_fraction: 0.2, seed };

    let human = human_labels(&corpus.annotations).unwrap();
    let (train_h, test_h): (Vec<_>, Vec<_>) = human.into_iter().partition(|e| !split.is_test(&e.query_id));
    let (tr, va) = split_by_query(train_h, 0.1, seed + 1);
    let mut tcfg = TeacherTrainConfig::default();
    tcfg.train = TrainConfig { epochs: 3, seed, ..tcfg.train };
    let tr = teacher_examples(&tr, &queries, &pins, &vocab, &tcfg.text).unwrap();
    let va = teacher_examples(&va, &queries, &pins, &vocab, &tcfg.text).unwrap();
    let trained = train_teacher(&tr, &va, &vocab, &tcfg).unwrap();
    let teacher = Teacher { model: trained.model, vocab, text: tcfg.text };

    let pairs = distillation_pairs(&corpus.engagement, &corpus.annotations, split);
    assert!(pairs.iter().all(|p| !split.is_test(&p.query_id)));
    let pool = label_pool(&teacher, &pairs, &queries, &pins).unwrap();
    assert!(pool.skipped.is_empty());
    assert_eq!(pool.examples.len(), pairs.len());
    let (sample, report) = stratified_sample(&pool.examples, &SamplingSpec::uniform(1500, seed)).unwrap();
    assert_eq!(sample.len() + report.shortfall.iter().sum::<usize>(), 1500);

    let ctx = FeatureContext::new(FeatureLayout::default(), build_bm25_index(pins.as_slice()).unwrap(), HashMap::new());
    let mut fz = Featurizer::new(&ctx, &queries, &pins);
    let test = build_test_set(&test_h, split, &mut fz).unwrap();
    assert_eq!(test.len(), test_h.len());
    let items = sample
        .iter()
        .map(|e| (e.query_id.clone(), (fz.features(&e.query_id, &e.pin_id).unwrap(), e.label)))
        .collect();
    let mut student = StudentTrainConfig::default();
    student.train = TrainConfig { epochs: 3, seed, ..student.train };
    let cfg = ScalingConfig {
        sizes: vec![1500],
        student,
        sample_seed: seed,
        valid_fraction: 0.1,
        valid_seed: seed + 2,
    };
    let (model, eval, n_train) = train_and_eval(items, &test, &cfg).unwrap();
    assert!(n_train > 0 && n_train < sample.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.json");
    save_student(&model, &[], &path).unwrap();
    let loaded = load_student(&path, Some(&FeatureLayout::default())).unwrap();
    let probs = test
        .iter()
        .map(|t| {
            let a = student_forward(&model, &t.features).unwrap();
            let b = student_forward(&loaded, &t.features).unwrap();
            assert_eq!(a, b);
            *a.probs()
        })
        .collect();
    (eval, probs, dir)
}

#[test]
fn small_pipeline_runs_and_is_deterministic() {
    let (a, pa, _d1) = run(11);
    assert!(a.n_examples > 0);
    assert!((0.0..=1.0).contains(&a.accuracy));
    for auc in [a.auroc_3plus, a.auroc_4plus, a.auroc_5plus].into_iter().flatten() {
        assert!((0.0..=1.0).contains(&auc));
    }
    let (b, pb, _d2) = run(11);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}
