//! Small differentiable kernel shared by the teacher and the student: dense
//! layers with hand-written gradients, ReLU, soft-target cross-entropy, Adam,
//! a finite-difference gradient checker and a JSON checkpoint container.
//!
//! Everything is `f64`. Batched operations go through `ndarray`'s
//! single-threaded matrix product, so results are bit-reproducible.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SoftLabel, NUM_LEVELS};
use crate::error::{Error, Result};

/// Row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

/// Seeded uniform(−a, a) matrix with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fully connected layer `y = W x + b` with `W` of shape `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients of a dense layer for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub dx: Array1<f64>,
    pub dweight: Array2<f64>,
    pub dbias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            weight: standard(weight),
            bias,
        })
    }

    /// Uniform-initialized weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            weight: uniform_init(outputs, inputs, inputs, outputs, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn check_input(&self, n: usize) -> Result<()> {
        if n != self.inputs() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {n}",
                self.inputs()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        Ok(self.weight.dot(&x) + &self.bias)
    }

    /// `dx = Wᵀ dy`, `dW = dy xᵀ`, `db = dy`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Result<DenseGrads> {
        self.check_input(x.len())?;
        if dy.len() != self.outputs() {
            return Err(Error::Shape(format!(
                "layer has {} outputs, upstream gradient has {}",
                self.outputs(),
                dy.len()
            )));
        }
        let dx = self.weight.t().dot(&dy);
        let dweight = dy
            .insert_axis(Axis(1))
            .dot(&x.insert_axis(Axis(0)));
        Ok(DenseGrads {
            dx,
            dweight: standard(dweight),
            dbias: dy.to_owned(),
        })
    }

    /// Row-wise forward over a batch `x` of shape `[batch × in]`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Batched backward. Weight and bias gradients are summed over rows.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
        self.check_input(x.ncols())?;
        if dy.ncols() != self.outputs() || dy.nrows() != x.nrows() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match batch {} × {}",
                dy.shape(),
                x.nrows(),
                self.outputs()
            )));
        }
        let dx = dy.dot(&self.weight);
        let dweight = standard(dy.t().dot(&x));
        let dbias = dy.sum_axis(Axis(0));
        Ok((dx, dweight, dbias))
    }
}

pub fn relu_forward<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// `dx_i = dy_i · [x_i > 0]`.
pub fn relu_backward<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> Result<ndarray::Array<f64, D>> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "relu input {:?} vs gradient {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    Ok(dx)
}

/// Numerically stable softmax over five logits.
pub fn softmax(logits: &[f64; NUM_LEVELS]) -> [f64; NUM_LEVELS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|z| (z - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

pub fn softmax_label(logits: &[f64; NUM_LEVELS]) -> SoftLabel {
    SoftLabel::from_softmax(softmax(logits))
}

/// Cross-entropy against a soft target and its gradient `q − target`.
pub fn softmax_xent(
    logits: &[f64; NUM_LEVELS],
    target: &SoftLabel,
) -> Result<(f64, [f64; NUM_LEVELS])> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let t = target.probs();
    let mut loss = 0.0;
    let mut grad = [0.0; NUM_LEVELS];
    for c in 0..NUM_LEVELS {
        let log_q = logits[c] - max - log_norm;
        if t[c] > 0.0 {
            loss -= t[c] * log_q;
        }
        grad[c] = log_q.exp() - t[c];
    }
    Ok((loss, grad))
}

/// A named, shaped view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A model whose parameters can be enumerated as flat tensors in a fixed
/// order. Gradients and optimizer moments reuse the model's own type.
pub trait Parameters {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for s in z.params_mut() {
            s.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Euclidean norm over every parameter.
    fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Row-major copy of `a` unless it already is row-major. Matrix products
/// may hand back column-major results.
pub(crate) fn standard<D: Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn as_slice<D: Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays are row-major")
}

pub(crate) fn as_slice_mut<D: Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are row-major")
}

pub(crate) fn param_ref<'a, D: Dimension>(
    name: impl Into<String>,
    a: &'a ndarray::Array<f64, D>,
) -> ParamRef<'a> {
    ParamRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: as_slice(a),
    }
}

impl Parameters for DenseLayer {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![param_ref("weight", &self.weight), param_ref("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![as_slice_mut(&mut self.weight), as_slice_mut(&mut self.bias)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` with `grads`.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grad_refs = grads.params();
    let mut param_slices = params.params_mut();
    if grad_refs.len() != param_slices.len() || state.m.len() != param_slices.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameter tensors, {} gradient tensors, {} moment tensors",
            param_slices.len(),
            grad_refs.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (k, p) in param_slices.iter_mut().enumerate() {
        let g = grad_refs[k].data;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::Shape(format!(
                "adam: tensor {} has {} values but gradient has {}",
                grad_refs[k].name,
                p.len(),
                g.len()
            )));
        }
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Largest relative error seen by [`grad_check`] and where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub probes: usize,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` gradients against central differences of `loss` on
/// `n_probes` seeded random coordinates. A probe picks a tensor uniformly,
/// then a coordinate uniformly within it. Relative error is
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    h: f64,
    n_probes: usize,
    seed: u64,
) -> GradCheckReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut rng = seeded_rng(seed);
    let shapes: Vec<(String, usize)> = params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.data.len()))
        .collect();
    let live: Vec<usize> = (0..shapes.len()).filter(|&k| shapes[k].1 > 0).collect();
    let grads: Vec<Vec<f64>> = analytic.params().iter().map(|p| p.data.to_vec()).collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        probes: n_probes,
    };
    for _ in 0..n_probes {
        let k = live[rng.random_range(0..live.len())];
        let i = rng.random_range(0..shapes[k].1);
        let original = probe.params()[k].data[i];
        probe.params_mut()[k][i] = original + h;
        let up = loss(&probe);
        probe.params_mut()[k][i] = original - h;
        let down = loss(&probe);
        probe.params_mut()[k][i] = original;
        let numeric = (up - down) / (2.0 * h);
        let a = grads[k][i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_param = shapes[k].0.clone();
            report.worst_index = i;
        }
    }
    report
}

pub const CHECKPOINT_FORMAT: &str = "searchrel.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Versioned container of named parameter tensors, serialized as JSON.
///
/// ```json
/// {"format":"searchrel.checkpoint","version":1,
///  "tensors":[{"name":"weight","shape":[2,2],"data":[1.0,0.0,0.0,1.0]}, ...]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<P: Parameters>(model: &P) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors: model
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name,
                    tensor: Tensor {
                        shape: p.shape,
                        data: p.data.to_vec(),
                    },
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: self.version,
            });
        }
        for t in &self.tensors {
            let n: usize = t.tensor.shape.iter().product();
            if n != t.tensor.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} but {} values",
                    t.name,
                    t.tensor.shape,
                    t.tensor.data.len()
                )));
            }
        }
        Ok(())
    }

    /// Copies tensors into `model`; names and shapes must match in order.
    pub fn restore<P: Parameters>(&self, model: &mut P) -> Result<()> {
        self.validate()?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|p| (p.name, p.shape))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    t.name, t.tensor.shape
                )));
            }
        }
        for (dst, t) in model.params_mut().into_iter().zip(&self.tensors) {
            dst.copy_from_slice(&t.tensor.data);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// A model mapping inputs to a distribution over the five levels, trainable
/// by [`train_soft_classifier`].
pub trait SoftClassifier: Parameters + Clone {
    type Input;

    /// Adds the summed loss gradient over `batch` into `grads` and returns
    /// the summed loss. `grads` has the model's shape.
    fn accumulate_gradients(
        &self,
        batch: &[(&Self::Input, &SoftLabel)],
        grads: &mut Self,
    ) -> Result<f64>;

    fn predict(&self, input: &Self::Input) -> Result<SoftLabel>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Validation(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: M,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Mean loss and argmax accuracy of `model` on `set`.
pub fn evaluate_loss_accuracy<M: SoftClassifier>(
    model: &M,
    set: &[(M::Input, SoftLabel)],
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (x, y) in set {
        let q = model.predict(x)?;
        loss -= y
            .probs()
            .iter()
            .zip(q.probs())
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, p)| t * p.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>();
        if q.argmax_level() == y.argmax_level() {
            hits += 1;
        }
    }
    let n = set.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

fn norms_summary<P: Parameters>(model: &P) -> String {
    model
        .params()
        .iter()
        .map(|p| {
            let n = p.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            format!("{}={n:.4e}", p.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Minibatch Adam on soft-target cross-entropy with per-epoch validation
/// and early stopping. Examples are reshuffled every epoch from a generator
/// seeded by `config.seed`; gradients are batch means.
pub fn train_soft_classifier<M: SoftClassifier>(
    init: M,
    train: &[(M::Input, SoftLabel)],
    valid: &[(M::Input, SoftLabel)],
    config: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut model = init;
    let mut state = AdamState::new(config.adam, &model);
    let mut grads = model.zeroed();
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            for g in grads.params_mut() {
                g.fill(0.0);
            }
            let batch: Vec<(&M::Input, &SoftLabel)> =
                chunk.iter().map(|&i| (&train[i].0, &train[i].1)).collect();
            let loss = model.accumulate_gradients(&batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: loss {loss}; parameter norms: {}",
                    norms_summary(&model)
                )));
            }
            epoch_loss += loss;
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.params_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(&mut model, &grads, &mut state)?;
        }
        let (valid_loss, valid_accuracy) = evaluate_loss_accuracy(&model, valid)?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_loss,
            valid_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, valid loss {:.5}, valid accuracy {:.4}",
            stats.train_loss,
            valid_loss,
            valid_accuracy
        );
        history.push(stats);
        if best.as_ref().is_none_or(|(acc, _, _)| valid_accuracy > *acc) {
            best = Some((valid_accuracy, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}
