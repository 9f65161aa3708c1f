//! Servable student: a feed-forward network over [`StudentFeatureVector`]s,
//! trained on teacher soft labels.
//!
//! The network input concatenates, in order: the query embedding, the pin
//! embedding, a linear embedding `x · w + v` of every scalar feature, one
//! learned row per categorical attribute, and the presence flags.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{SoftLabel, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, StudentFeatureVector, NUM_FLAGS};
use crate::neuralcore::{
    as_slice, as_slice_mut, param_ref, relu_backward, relu_forward, seeded_rng, softmax_label,
    softmax_xent, train_soft_classifier, uniform_init, AdamConfig, Checkpoint, DenseLayer,
    EpochStats, ParamRef, Parameters, SoftClassifier, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub layout: FeatureLayout,
    pub d_num: usize,
    pub d_cat: usize,
    pub hidden: [usize; 2],
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            layout: FeatureLayout::default(),
            d_num: 8,
            d_cat: 8,
            hidden: [256, 128],
        }
    }
}

impl StudentConfig {
    pub fn input_dim(&self) -> usize {
        let l = &self.layout;
        l.query_embedding_dim
            + l.pin_embedding_dim
            + l.num_scalars() * self.d_num
            + l.categorical_attrs.len() * self.d_cat
            + NUM_FLAGS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub layout_hash: u64,
    /// Known values per categorical attribute, sorted. Table row `i + 1`
    /// belongs to value `i`; row 0 is shared by unseen and missing values.
    pub categories: Vec<Vec<String>>,
    pub cat_tables: Vec<Array2<f64>>,
    /// `[num_scalars × d_num]`
    pub num_weight: Array2<f64>,
    pub num_bias: Array2<f64>,
    pub trunk: [DenseLayer; 3],
}

/// Distinct non-empty values of each categorical attribute, sorted.
pub fn collect_categories<'a, I>(layout: &FeatureLayout, fvs: I) -> Vec<Vec<String>>
where
    I: IntoIterator<Item = &'a StudentFeatureVector>,
{
    let mut sets: Vec<std::collections::BTreeSet<String>> =
        vec![Default::default(); layout.categorical_attrs.len()];
    for fv in fvs {
        for (set, v) in sets.iter_mut().zip(&fv.categorical) {
            if !v.is_empty() {
                set.insert(v.clone());
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

impl StudentModel {
    pub fn init(config: StudentConfig, categories: Vec<Vec<String>>, seed: u64) -> Result<Self> {
        let n_attr = config.layout.categorical_attrs.len();
        if categories.len() != n_attr {
            return Err(Error::Shape(format!(
                "{} category lists for {n_attr} attributes",
                categories.len()
            )));
        }
        if config.d_num == 0 || config.d_cat == 0 || config.hidden.contains(&0) {
            return Err(Error::Validation("student dims must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let s = config.layout.num_scalars();
        let cat_tables = categories
            .iter()
            .map(|c| uniform_init(c.len() + 1, config.d_cat, c.len() + 1, config.d_cat, &mut rng))
            .collect();
        let num_weight = uniform_init(s, config.d_num, 1, config.d_num, &mut rng);
        let num_bias = Array2::zeros((s, config.d_num));
        let [h1, h2] = config.hidden;
        let trunk = [
            DenseLayer::init(config.input_dim(), h1, &mut rng),
            DenseLayer::init(h1, h2, &mut rng),
            DenseLayer::init(h2, NUM_LEVELS, &mut rng),
        ];
        Ok(StudentModel {
            layout_hash: config.layout.hash(),
            config,
            categories,
            cat_tables,
            num_weight,
            num_bias,
            trunk,
        })
    }

    fn cat_row(&self, attr: usize, value: &str) -> usize {
        self.categories[attr]
            .binary_search_by(|v| v.as_str().cmp(value))
            .map_or(0, |i| i + 1)
    }

    fn check(&self, fv: &StudentFeatureVector) -> Result<()> {
        if fv.layout_hash != self.layout_hash {
            return Err(Error::LayoutMismatch {
                expected: self.layout_hash,
                actual: fv.layout_hash,
            });
        }
        let l = &self.config.layout;
        let dims = [
            ("query_embedding", fv.query_embedding.len(), l.query_embedding_dim),
            ("pin_embedding", fv.pin_embedding.len(), l.pin_embedding_dim),
            ("bm25", fv.bm25.len(), l.fields.len()),
            ("overlap", fv.overlap.len(), l.fields.len()),
            ("categorical", fv.categorical.len(), l.categorical_attrs.len()),
        ];
        for (name, actual, expected) in dims {
            if actual != expected {
                return Err(Error::Dimension {
                    id: name.into(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Writes the network input for `fv` into `out`.
    fn fill_input(&self, fv: &StudentFeatureVector, out: &mut [f64]) -> Result<()> {
        self.check(fv)?;
        let dn = self.config.d_num;
        let dc = self.config.d_cat;
        let mut o = 0;
        for &x in fv.query_embedding.iter().chain(&fv.pin_embedding) {
            out[o] = x;
            o += 1;
        }
        for (s, x) in fv.scalars().enumerate() {
            let w = self.num_weight.row(s);
            let v = self.num_bias.row(s);
            for k in 0..dn {
                out[o + k] = x * w[k] + v[k];
            }
            o += dn;
        }
        for (a, value) in fv.categorical.iter().enumerate() {
            let row = self.cat_tables[a].row(self.cat_row(a, value));
            for k in 0..dc {
                out[o + k] = row[k];
            }
            o += dc;
        }
        out[o..o + NUM_FLAGS].copy_from_slice(&fv.flags);
        Ok(())
    }

    pub fn logits(&self, fv: &StudentFeatureVector) -> Result<[f64; NUM_LEVELS]> {
        let mut x = Array1::zeros(self.config.input_dim());
        self.fill_input(fv, as_slice_mut(&mut x))?;
        let h1 = relu_forward(&self.trunk[0].forward(x.view())?);
        let h2 = relu_forward(&self.trunk[1].forward(h1.view())?);
        let z = self.trunk[2].forward(h2.view())?;
        let mut out = [0.0; NUM_LEVELS];
        out.copy_from_slice(as_slice(&z));
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        Parameters::num_params(self)
    }
}

pub fn student_forward(model: &StudentModel, fv: &StudentFeatureVector) -> Result<SoftLabel> {
    Ok(softmax_label(&model.logits(fv)?))
}

impl Parameters for StudentModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v: Vec<ParamRef<'_>> = self
            .cat_tables
            .iter()
            .zip(&self.config.layout.categorical_attrs)
            .map(|(t, a)| param_ref(format!("categorical.{a}"), t))
            .collect();
        v.push(param_ref("numerical.weight", &self.num_weight));
        v.push(param_ref("numerical.bias", &self.num_bias));
        for (i, l) in self.trunk.iter().enumerate() {
            v.push(param_ref(format!("trunk.{i}.weight"), &l.weight));
            v.push(param_ref(format!("trunk.{i}.bias"), &l.bias));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.cat_tables.iter_mut().map(as_slice_mut).collect();
        v.push(as_slice_mut(&mut self.num_weight));
        v.push(as_slice_mut(&mut self.num_bias));
        for l in self.trunk.iter_mut() {
            v.push(as_slice_mut(&mut l.weight));
            v.push(as_slice_mut(&mut l.bias));
        }
        v
    }
}

impl SoftClassifier for StudentModel {
    type Input = StudentFeatureVector;

    fn accumulate_gradients(
        &self,
        batch: &[(&StudentFeatureVector, &SoftLabel)],
        grads: &mut Self,
    ) -> Result<f64> {
        let b = batch.len();
        let din = self.config.input_dim();
        let mut x = Array2::zeros((b, din));
        for (i, (fv, _)) in batch.iter().enumerate() {
            let mut row = x.row_mut(i);
            self.fill_input(fv, row.as_slice_mut().expect("row-major"))?;
        }
        let a1 = self.trunk[0].forward_batch(x.view())?;
        let h1 = relu_forward(&a1);
        let a2 = self.trunk[1].forward_batch(h1.view())?;
        let h2 = relu_forward(&a2);
        let z = self.trunk[2].forward_batch(h2.view())?;
        let mut dz = Array2::zeros((b, NUM_LEVELS));
        let mut loss = 0.0;
        for (i, (_, y)) in batch.iter().enumerate() {
            let logits: [f64; NUM_LEVELS] = std::array::from_fn(|c| z[[i, c]]);
            let (l, g) = softmax_xent(&logits, y)?;
            loss += l;
            for c in 0..NUM_LEVELS {
                dz[[i, c]] = g[c];
            }
        }
        let (dh2, dw3, db3) = self.trunk[2].backward_batch(h2.view(), dz.view())?;
        let da2 = relu_backward(&a2, &dh2)?;
        let (dh1, dw2, db2) = self.trunk[1].backward_batch(h1.view(), da2.view())?;
        let da1 = relu_backward(&a1, &dh1)?;
        let (dx, dw1, db1) = self.trunk[0].backward_batch(x.view(), da1.view())?;
        for (l, (dw, db)) in grads.trunk.iter_mut().zip([(dw1, db1), (dw2, db2), (dw3, db3)]) {
            l.weight += &dw;
            l.bias += &db;
        }
        let lay = &self.config.layout;
        let dn = self.config.d_num;
        let dc = self.config.d_cat;
        let num_off = lay.query_embedding_dim + lay.pin_embedding_dim;
        let cat_off = num_off + lay.num_scalars() * dn;
        for (i, (fv, _)) in batch.iter().enumerate() {
            let g = dx.index_axis(Axis(0), i);
            for (s, xs) in fv.scalars().enumerate() {
                let seg = g.slice(ndarray::s![num_off + s * dn..num_off + (s + 1) * dn]);
                let mut w = grads.num_weight.row_mut(s);
                w.scaled_add(xs, &seg);
                let mut v = grads.num_bias.row_mut(s);
                v += &seg;
            }
            for (a, value) in fv.categorical.iter().enumerate() {
                let seg = g.slice(ndarray::s![cat_off + a * dc..cat_off + (a + 1) * dc]);
                let row = self.cat_row(a, value);
                let mut t = grads.cat_tables[a].row_mut(row);
                t += &seg;
            }
        }
        Ok(loss)
    }

    fn predict(&self, input: &StudentFeatureVector) -> Result<SoftLabel> {
        student_forward(self, input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentTrainConfig {
    pub model: StudentConfig,
    pub train: TrainConfig,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        StudentTrainConfig {
            model: StudentConfig::default(),
            train: TrainConfig {
                epochs: 30,
                batch_size: 128,
                seed: 0,
                adam: AdamConfig::default(),
                patience: 4,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedStudent {
    pub model: StudentModel,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Distillation: Adam on cross-entropy against the full soft targets.
/// Categorical vocabularies come from the training set.
pub fn train_student(
    train: &[(StudentFeatureVector, SoftLabel)],
    valid: &[(StudentFeatureVector, SoftLabel)],
    config: &StudentTrainConfig,
) -> Result<TrainedStudent> {
    let categories = collect_categories(&config.model.layout, train.iter().map(|(fv, _)| fv));
    let init = StudentModel::init(config.model.clone(), categories, config.train.seed)?;
    let out = train_soft_classifier(init, train, valid, &config.train)?;
    Ok(TrainedStudent {
        model: out.model,
        best_epoch: out.best_epoch,
        history: out.history,
    })
}

pub const STUDENT_FORMAT: &str = "searchrel.student";
pub const STUDENT_VERSION: u32 = 1;

/// On-disk student: configuration, layout hash, categorical vocabularies and
/// a parameter checkpoint, as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudentFile {
    format: String,
    version: u32,
    config: StudentConfig,
    layout_hash: u64,
    categories: Vec<Vec<String>>,
    #[serde(default)]
    history: Vec<EpochStats>,
    checkpoint: Checkpoint,
}

pub fn save_student(model: &StudentModel, history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = StudentFile {
        format: STUDENT_FORMAT.into(),
        version: STUDENT_VERSION,
        config: model.config.clone(),
        layout_hash: model.layout_hash,
        categories: model.categories.clone(),
        history: history.to_vec(),
        checkpoint: Checkpoint::capture(model),
    };
    let json = serde_json::to_string(&file).expect("student serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads a student; with `expected_layout`, also requires the stored layout
/// to hash the same.
pub fn load_student(path: impl AsRef<Path>, expected_layout: Option<&FeatureLayout>) -> Result<StudentModel> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: StudentFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.format != STUDENT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format `{}`",
            path.display(),
            file.format
        )));
    }
    if file.version != STUDENT_VERSION {
        return Err(Error::Version {
            expected: STUDENT_VERSION,
            found: file.version,
        });
    }
    let actual = file.config.layout.hash();
    if actual != file.layout_hash {
        return Err(Error::LayoutMismatch {
            expected: file.layout_hash,
            actual,
        });
    }
    if let Some(l) = expected_layout {
        if l.hash() != actual {
            return Err(Error::LayoutMismatch {
                expected: l.hash(),
                actual,
            });
        }
    }
    let mut model = StudentModel::init(file.config, file.categories, 0)?;
    file.checkpoint.restore(&mut model)?;
    Ok(model)
}
