//! Cross-encoder teacher: the query and pin share one token sequence, token
//! and segment embeddings are summed and mean-pooled, and a two-layer head
//! maps the pooled vector to five relevance logits.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{PinDocument, QueryRecord, SoftLabel, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::evalmetrics::{build_report, EvalReport, ScoredExample};
use crate::neuralcore::{
    as_slice, as_slice_mut, param_ref, relu_backward, relu_forward, seeded_rng, softmax_label,
    softmax_xent, train_soft_classifier, uniform_init, AdamConfig, Checkpoint, DenseLayer,
    EpochStats, ParamRef, Parameters, SoftClassifier, TrainConfig,
};
use crate::textrep::{encode_pair, TextRepConfig, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub d: usize,
    pub hidden: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { d: 64, hidden: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderModel {
    pub config: TeacherConfig,
    /// `[V × d]`
    pub token_embedding: Array2<f64>,
    /// `[2 × d]`, query segment first.
    pub segment_embedding: Array2<f64>,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl CrossEncoderModel {
    pub fn init(vocab_size: usize, config: TeacherConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let d = config.d;
        CrossEncoderModel {
            config,
            token_embedding: uniform_init(vocab_size, d, vocab_size, d, &mut rng),
            segment_embedding: uniform_init(2, d, 2, d, &mut rng),
            hidden: DenseLayer::init(d, config.hidden, &mut rng),
            output: DenseLayer::init(config.hidden, NUM_LEVELS, &mut rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Empty("teacher input sequence".into()));
        }
        if seq.segment_ids.len() != seq.tokens.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} segment ids",
                seq.tokens.len(),
                seq.segment_ids.len()
            )));
        }
        let v = self.vocab_size();
        if let Some(t) = seq.tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Shape(format!("token id {t} outside vocabulary of {v}")));
        }
        if let Some(s) = seq.segment_ids.iter().find(|&&s| s > 1) {
            return Err(Error::Shape(format!("segment id {s}")));
        }
        Ok(())
    }

    /// Mean over positions of `E[token] + S[segment]`.
    fn pool_into(&self, seq: &TokenSeq, out: &mut [f64]) {
        out.fill(0.0);
        for (&t, &s) in seq.tokens.iter().zip(&seq.segment_ids) {
            let e = self.token_embedding.row(t as usize);
            let g = self.segment_embedding.row(s as usize);
            for ((o, a), b) in out.iter_mut().zip(e).zip(g) {
                *o += a + b;
            }
        }
        let n = seq.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }

    pub fn logits(&self, seq: &TokenSeq) -> Result<[f64; NUM_LEVELS]> {
        self.check_seq(seq)?;
        let mut pooled = Array1::zeros(self.config.d);
        self.pool_into(seq, as_slice_mut(&mut pooled));
        let h = relu_forward(&self.hidden.forward(pooled.view())?);
        let z = self.output.forward(h.view())?;
        let mut out = [0.0; NUM_LEVELS];
        out.copy_from_slice(as_slice(&z));
        Ok(out)
    }
}

/// Softmax over the head's logits for one joint sequence.
pub fn teacher_forward(model: &CrossEncoderModel, seq: &TokenSeq) -> Result<SoftLabel> {
    Ok(softmax_label(&model.logits(seq)?))
}

impl Parameters for CrossEncoderModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            param_ref("token_embedding", &self.token_embedding),
            param_ref("segment_embedding", &self.segment_embedding),
            param_ref("hidden.weight", &self.hidden.weight),
            param_ref("hidden.bias", &self.hidden.bias),
            param_ref("output.weight", &self.output.weight),
            param_ref("output.bias", &self.output.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            as_slice_mut(&mut self.token_embedding),
            as_slice_mut(&mut self.segment_embedding),
            as_slice_mut(&mut self.hidden.weight),
            as_slice_mut(&mut self.hidden.bias),
            as_slice_mut(&mut self.output.weight),
            as_slice_mut(&mut self.output.bias),
        ]
    }
}

impl SoftClassifier for CrossEncoderModel {
    type Input = TokenSeq;

    fn accumulate_gradients(
        &self,
        batch: &[(&TokenSeq, &SoftLabel)],
        grads: &mut Self,
    ) -> Result<f64> {
        let b = batch.len();
        let d = self.config.d;
        let mut pooled = Array2::zeros((b, d));
        for (i, (seq, _)) in batch.iter().enumerate() {
            self.check_seq(seq)?;
            let mut row = pooled.row_mut(i);
            self.pool_into(seq, row.as_slice_mut().expect("row-major"));
        }
        let h_pre = self.hidden.forward_batch(pooled.view())?;
        let h = relu_forward(&h_pre);
        let z = self.output.forward_batch(h.view())?;
        let mut dz = Array2::zeros((b, NUM_LEVELS));
        let mut loss = 0.0;
        for (i, (_, y)) in batch.iter().enumerate() {
            let mut logits = [0.0; NUM_LEVELS];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = z[[i, c]];
            }
            let (l, g) = softmax_xent(&logits, y)?;
            loss += l;
            for c in 0..NUM_LEVELS {
                dz[[i, c]] = g[c];
            }
        }
        let (dh, dw2, db2) = self.output.backward_batch(h.view(), dz.view())?;
        let dh_pre = relu_backward(&h_pre, &dh)?;
        let (dpooled, dw1, db1) = self.hidden.backward_batch(pooled.view(), dh_pre.view())?;
        grads.output.weight += &dw2;
        grads.output.bias += &db2;
        grads.hidden.weight += &dw1;
        grads.hidden.bias += &db1;
        for (i, (seq, _)) in batch.iter().enumerate() {
            let scaled = dpooled.index_axis(Axis(0), i).mapv(|g| g / seq.len() as f64);
            for (&t, &s) in seq.tokens.iter().zip(&seq.segment_ids) {
                let mut e = grads.token_embedding.row_mut(t as usize);
                e += &scaled;
                let mut g = grads.segment_embedding.row_mut(s as usize);
                g += &scaled;
            }
        }
        Ok(loss)
    }

    fn predict(&self, input: &TokenSeq) -> Result<SoftLabel> {
        teacher_forward(self, input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub model: TeacherConfig,
    pub text: TextRepConfig,
    pub train: TrainConfig,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            model: TeacherConfig::default(),
            text: TextRepConfig::default(),
            train: TrainConfig {
                epochs: 40,
                batch_size: 64,
                seed: 0,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                patience: 10,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: CrossEncoderModel,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains from a seeded initialization and returns the best-on-validation
/// parameters.
pub fn train_teacher(
    train: &[(TokenSeq, SoftLabel)],
    valid: &[(TokenSeq, SoftLabel)],
    vocab: &Vocabulary,
    config: &TeacherTrainConfig,
) -> Result<TrainedTeacher> {
    config.text.validate()?;
    if config.model.d == 0 || config.model.hidden == 0 {
        return Err(Error::Validation("teacher dims must be positive".into()));
    }
    let init = CrossEncoderModel::init(vocab.len(), config.model, config.train.seed);
    let out = train_soft_classifier(init, train, valid, &config.train)?;
    Ok(TrainedTeacher {
        model: out.model,
        best_epoch: out.best_epoch,
        history: out.history,
    })
}

/// Scores a query against a pin with a relevance distribution.
pub trait TeacherScorer: Sync {
    fn score(&self, query: &QueryRecord, pin: &PinDocument) -> Result<SoftLabel>;
}

/// Tokenize, impute, assemble, join and run the teacher.
pub fn predict_distribution(
    model: &CrossEncoderModel,
    query: &QueryRecord,
    pin: &PinDocument,
    vocab: &Vocabulary,
    config: &TextRepConfig,
) -> Result<SoftLabel> {
    let seq = encode_pair(&query.text, pin, vocab, config)?;
    teacher_forward(model, &seq)
}

/// A trained teacher bundled with the vocabulary and text settings it was
/// trained with.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: CrossEncoderModel,
    pub vocab: Vocabulary,
    pub text: TextRepConfig,
}

impl TeacherScorer for Teacher {
    fn score(&self, query: &QueryRecord, pin: &PinDocument) -> Result<SoftLabel> {
        predict_distribution(&self.model, query, pin, &self.vocab, &self.text)
    }
}

/// Sidecar metadata written next to a teacher checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub vocab_fingerprint: u64,
    pub model: TeacherConfig,
    pub text: TextRepConfig,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

pub const TEACHER_CHECKPOINT: &str = "checkpoint.json";
pub const TEACHER_META: &str = "meta.json";
pub const TEACHER_VOCAB: &str = "vocab.jsonl";

impl Teacher {
    /// Writes checkpoint, metadata and vocabulary into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, best_epoch: usize, history: &[EpochStats]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Checkpoint::capture(&self.model).save(dir.join(TEACHER_CHECKPOINT))?;
        self.vocab.save(dir.join(TEACHER_VOCAB))?;
        let meta = TeacherMeta {
            vocab_fingerprint: self.vocab.fingerprint(),
            model: self.model.config,
            text: self.text.clone(),
            best_epoch,
            history: history.to_vec(),
        };
        let path = dir.join(TEACHER_META);
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, TeacherMeta)> {
        let dir = dir.as_ref();
        let meta_path = dir.join(TEACHER_META);
        let raw = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TeacherMeta = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let vocab = Vocabulary::load(dir.join(TEACHER_VOCAB))?;
        if vocab.fingerprint() != meta.vocab_fingerprint {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary fingerprint {:016x} does not match metadata {:016x}",
                dir.display(),
                vocab.fingerprint(),
                meta.vocab_fingerprint
            )));
        }
        let mut model = CrossEncoderModel::init(vocab.len(), meta.model, 0);
        Checkpoint::load(dir.join(TEACHER_CHECKPOINT))?.restore(&mut model)?;
        Ok((
            Teacher {
                model,
                vocab,
                text: meta.text.clone(),
            },
            meta,
        ))
    }
}

/// Accuracy and AUROC of the teacher's predictions against `test` labels.
pub fn eval_teacher(model: &CrossEncoderModel, test: &[(TokenSeq, SoftLabel)]) -> Result<EvalReport> {
    let scored = test
        .iter()
        .map(|(seq, truth)| {
            Ok(ScoredExample {
                predicted: teacher_forward(model, seq)?,
                truth: *truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(&scored, &[], &[])
}
