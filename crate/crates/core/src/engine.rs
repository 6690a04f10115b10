//! Training loops: ERM teachers and student distillation.
//!
//! Every method shares one optimizer (SGD, momentum, decoupled-from-nothing
//! L2 weight decay added to the gradient) and one batching scheme, so method
//! comparisons differ only in how teacher knowledge is combined:
//!
//! | method    | per-minibatch target                                        |
//! |-----------|-------------------------------------------------------------|
//! | `one_hot` | ground-truth labels (cross-entropy), no teachers            |
//! | `aver`    | mean of the teachers' softened outputs                      |
//! | `random`  | one teacher drawn uniformly per minibatch                   |
//! | `aekd`    | min-norm convex combination of per-teacher batch gradients  |
//! | `agrekd`  | per-sample teacher weights from alignment with a biased model |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, GroupMetrics};
use crate::losses::{combined_loss, cross_entropy, ensemble_kd_loss, kd_loss, KdConfig};
use crate::model::Mlp;
use crate::tensor::{Rng, Tape, Tensor, Var};
use crate::weighting::{batch_alignments, weighted_kd_loss, AlignmentRecord, WeightingConfig};

pub use crate::eval::majority_vote;

const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;
const STREAM_SWITCH: u64 = 12;

const AEKD_MAX_ITERS: usize = 50;
const AEKD_GAP_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneHot,
    Aver,
    Random,
    Aekd,
    Agrekd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::OneHot, Method::Aver, Method::Random, Method::Aekd, Method::Agrekd];

    pub fn uses_teachers(self) -> bool {
        self != Method::OneHot
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::OneHot => "one_hot",
            Method::Aver => "aver",
            Method::Random => "random",
            Method::Aekd => "aekd",
            Method::Agrekd => "agrekd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of one_hot, aver, random, aekd, agrekd)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub kd: KdConfig,
    pub weighting: WeightingConfig,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            hidden: vec![64, 64],
            kd: KdConfig::default(),
            weighting: WeightingConfig::default(),
            method: Method::Agrekd,
        }
    }
}

impl TrainConfig {
    pub fn student() -> Self {
        Self {
            hidden: vec![16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        self.kd.validate()?;
        self.weighting.validate()
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    /// Seeded He initialization for a model trained under this config.
    pub fn init_model(&self, input: usize, classes: usize) -> Result<Mlp> {
        Mlp::new(&self.layer_dims(input, classes), &mut Rng::stream(self.seed, STREAM_INIT))
    }
}

/// SGD with momentum; weight decay is added to the gradient before the
/// velocity update.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, num_params: usize) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn from_config(cfg: &TrainConfig, model: &Mlp) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, model.num_params())
    }

    pub fn step(&mut self, model: &mut Mlp, grad: &Tensor) -> Result<()> {
        let mut theta = model.flatten_params();
        if grad.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "gradient has {} entries, model {}",
                grad.len(),
                theta.len()
            )));
        }
        for ((p, v), &g) in theta.data_mut().iter_mut().zip(&mut self.velocity).zip(grad.data()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
        model.unflatten_params(&theta)
    }
}

/// Frozen teachers plus the biased reference model.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    pub teachers: Vec<Mlp>,
    pub biased: Option<Mlp>,
    pub debiased_mask: Vec<bool>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<Mlp>, biased: Option<Mlp>, debiased_mask: Vec<bool>) -> Result<Self> {
        if debiased_mask.len() != teachers.len() {
            return Err(Error::Config(format!(
                "{} teachers but {} debiased flags",
                teachers.len(),
                debiased_mask.len()
            )));
        }
        let io = |m: &Mlp| (m.input_dim(), m.num_classes());
        if let Some(first) = teachers.first() {
            if teachers.iter().chain(biased.as_ref()).any(|m| io(m) != io(first)) {
                return Err(Error::Config("teachers disagree on input or output width".into()));
            }
        }
        Ok(Self {
            teachers,
            biased,
            debiased_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_avg_acc: Option<f64>,
    pub test_wga: Option<f64>,
    pub group_accs: Option<BTreeMap<usize, f64>>,
    /// Mean per-sample weight `W_t(x_i)` over debiased teachers (`agrekd` only).
    pub mean_weight_debiased: Option<f64>,
    /// Same, over teachers that were not debiased.
    pub mean_weight_biased: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<GroupMetrics>,
}

impl DistillReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Mean of a per-epoch weight statistic over all epochs that recorded it.
    pub fn mean_over_epochs(&self, pick: impl Fn(&EpochRecord) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.epochs.iter().filter_map(pick).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step, loss })
    }
}

/// Minibatch ERM with mean cross-entropy, from the config's seeded init.
pub fn train_erm(config: &TrainConfig, train: &GroupedDataset) -> Result<Mlp> {
    let init = config.init_model(train.num_features(), train.num_classes())?;
    train_erm_from(config, train, init)
}

pub fn train_erm_from(config: &TrainConfig, train: &GroupedDataset, mut model: Mlp) -> Result<Mlp> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut opt = Sgd::from_config(config, &model);
    let mut rng = Rng::stream(config.seed, STREAM_SHUFFLE);
    for epoch in 0..config.epochs {
        for (step, batch) in shuffled_batches(train.len(), config.batch_size, &mut rng).iter().enumerate() {
            let x = train.x().select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train.y()[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.constant(x);
            let z = bound.forward(&mut tape, xv)?;
            let ce = cross_entropy(&mut tape, z, &y)?;
            let loss = tape.mean(ce);
            check_finite(tape.value(loss).item()?, epoch, step)?;
            tape.backward(loss)?;
            opt.step(&mut model, &bound.flatten_grads(&tape)?)?;
        }
    }
    Ok(model)
}

/// Uniform teacher index for one minibatch.
pub fn random_switch_step(num_teachers: usize, rng: &mut Rng) -> usize {
    rng.below(num_teachers.max(1) as u64) as usize
}

/// Convex weights `λ` minimizing `‖Σ λ_t g_t‖²`, by Frank-Wolfe with exact
/// line search on the Gram matrix (≤ 50 iterations, duality gap ≤ 1e-6 on the
/// Gram matrix rescaled to unit max diagonal).
pub fn aekd_direction(grads: &[Tensor]) -> Result<Vec<f64>> {
    let m = grads.len();
    if m == 0 {
        return Err(Error::Parameter("AE-KD needs at least one teacher gradient".into()));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numeric("non-finite teacher gradient".into()));
    }
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let d = grads[i].dot(&grads[j])?;
            gram[i * m + j] = d;
            gram[j * m + i] = d;
        }
    }
    let scale = (0..m).map(|i| gram[i * m + i]).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(vec![1.0 / m as f64; m]);
    }
    gram.iter_mut().for_each(|v| *v /= scale);

    let mut lambda = vec![1.0 / m as f64; m];
    for _ in 0..AEKD_MAX_ITERS {
        let gl: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| gram[i * m + j] * lambda[j]).sum())
            .collect();
        let cur: f64 = lambda.iter().zip(&gl).map(|(l, g)| l * g).sum();
        let mut t = 0;
        for i in 1..m {
            if gl[i] < gl[t] {
                t = i;
            }
        }
        if cur - gl[t] <= AEKD_GAP_TOL {
            break;
        }
        // min over γ of ‖(1−γ)a + γ g_t‖², a = Σ λ g
        let denom = cur + gram[t * m + t] - 2.0 * gl[t];
        let gamma = if denom > 0.0 {
            ((cur - gl[t]) / denom).clamp(0.0, 1.0)
        } else {
            1.0
        };
        for (i, l) in lambda.iter_mut().enumerate() {
            *l *= 1.0 - gamma;
            if i == t {
                *l += gamma;
            }
        }
    }
    Ok(lambda)
}

/// Teacher and biased-model logits over the whole training set, computed once.
struct FrozenOutputs {
    teachers: Vec<Tensor>,
    biased: Option<Tensor>,
}

impl FrozenOutputs {
    fn batch(&self, idx: &[usize]) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let t = self
            .teachers
            .iter()
            .map(|l| l.select_rows(idx))
            .collect::<Result<Vec<_>>>()?;
        let b = self.biased.as_ref().map(|l| l.select_rows(idx)).transpose()?;
        Ok((t, b))
    }
}

#[derive(Default)]
struct WeightTally {
    debiased: (f64, usize),
    biased: (f64, usize),
}

impl WeightTally {
    fn add(&mut self, weights: &Tensor, mask: &[bool]) {
        let m = mask.len();
        for row in weights.data().chunks_exact(m) {
            for (&w, &d) in row.iter().zip(mask) {
                let slot = if d { &mut self.debiased } else { &mut self.biased };
                slot.0 += w;
                slot.1 += 1;
            }
        }
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        (mean(self.debiased), mean(self.biased))
    }
}

fn check_distill_inputs(config: &TrainConfig, train: &GroupedDataset, ensemble: &TeacherEnsemble, student: &Mlp) -> Result<()> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if student.input_dim() != train.num_features() || student.num_classes() != train.num_classes() {
        return Err(Error::Config(format!(
            "student maps {}→{}, data has {} features and {} classes",
            student.input_dim(),
            student.num_classes(),
            train.num_features(),
            train.num_classes()
        )));
    }
    if !config.method.uses_teachers() {
        return Ok(());
    }
    if ensemble.is_empty() {
        return Err(Error::Config(format!("method {} needs at least one teacher", config.method)));
    }
    let t = &ensemble.teachers[0];
    if t.input_dim() != student.input_dim() || t.num_classes() != student.num_classes() {
        return Err(Error::Config("teachers and student disagree on input or output width".into()));
    }
    if config.method == Method::Agrekd && ensemble.biased.is_none() {
        return Err(Error::Config("agrekd needs a designated biased model".into()));
    }
    Ok(())
}

/// Trains `student` on `train` under `config.method`.
///
/// With `kd.alpha == 1` the KD methods never read `train`'s labels. When
/// `monitor` is given, the student is evaluated on it after every epoch;
/// this has no effect on training.
pub fn distill(
    config: &TrainConfig,
    train: &GroupedDataset,
    ensemble: &TeacherEnsemble,
    student: Mlp,
    monitor: Option<&GroupedDataset>,
) -> Result<(Mlp, DistillReport)> {
    check_distill_inputs(config, train, ensemble, &student)?;
    let mut student = student;
    let frozen = FrozenOutputs {
        teachers: ensemble
            .teachers
            .iter()
            .map(|t| t.logits(train.x()))
            .collect::<Result<_>>()?,
        biased: ensemble.biased.as_ref().map(|b| b.logits(train.x())).transpose()?,
    };
    let kd = &config.kd;
    let use_labels = config.method == Method::OneHot || kd.alpha < 1.0;
    let mut opt = Sgd::from_config(config, &student);
    let mut shuffle_rng = Rng::stream(config.seed, STREAM_SHUFFLE);
    let mut switch_rng = Rng::stream(config.seed, STREAM_SWITCH);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut tally = WeightTally::default();
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(train.len(), config.batch_size, &mut shuffle_rng);
        for (step, batch) in batches.iter().enumerate() {
            let x = train.x().select_rows(batch)?;
            let labels: Option<Vec<usize>> = use_labels.then(|| batch.iter().map(|&i| train.y()[i]).collect());
            let (tl, bl) = frozen.batch(batch)?;

            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let z = bound.forward(&mut tape, xv)?;

            let cls = |tape: &mut Tape| -> Result<Var> {
                let ce = cross_entropy(tape, z, labels.as_deref().unwrap_or(&[]))?;
                Ok(tape.mean(ce))
            };

            let (loss_value, grad) = if config.method == Method::Aekd {
                let mut grads = Vec::with_capacity(tl.len());
                let mut values = Vec::with_capacity(tl.len());
                for t in &tl {
                    let l = kd_loss(&mut tape, z, t, kd.tau, kd.direction)?;
                    let l = tape.mean(l);
                    values.push(tape.value(l).item()?);
                    tape.backward(l)?;
                    grads.push(bound.flatten_grads(&tape)?);
                }
                let lambda = aekd_direction(&grads)?;
                let mut g = Tensor::zeros(&[student.num_params()]);
                for (lt, gt) in lambda.iter().zip(&grads) {
                    for (a, b) in g.data_mut().iter_mut().zip(gt.data()) {
                        *a += lt * b;
                    }
                }
                let mut value: f64 = lambda.iter().zip(&values).map(|(l, v)| l * v).sum();
                if kd.alpha < 1.0 {
                    let c = cls(&mut tape)?;
                    let cv = tape.value(c).item()?;
                    tape.backward(c)?;
                    let gc = bound.flatten_grads(&tape)?;
                    g = g.zip_with(&gc, "aekd combine", |a, b| kd.alpha * a + (1.0 - kd.alpha) * b)?;
                    value = kd.alpha * value + (1.0 - kd.alpha) * cv;
                }
                (value, g)
            } else {
                let per_sample = match config.method {
                    Method::OneHot => None,
                    Method::Aver => Some(ensemble_kd_loss(&mut tape, z, &tl, kd.tau, kd.direction)?),
                    Method::Random => {
                        let t = random_switch_step(tl.len(), &mut switch_rng);
                        Some(kd_loss(&mut tape, z, &tl[t], kd.tau, kd.direction)?)
                    }
                    Method::Agrekd => {
                        let bl = bl.as_ref().expect("checked above");
                        let (_, mut w) = batch_alignments(&student, &x, &tl, bl, kd, &config.weighting)?;
                        if !config.weighting.normalize_gradients {
                            w = w.map(|v| v.max(0.0));
                        }
                        tally.add(&w, &ensemble.debiased_mask);
                        let cols = tl
                            .iter()
                            .map(|t| kd_loss(&mut tape, z, t, kd.tau, kd.direction))
                            .collect::<Result<Vec<_>>>()?;
                        let stacked = tape.stack_cols(&cols)?;
                        Some(weighted_kd_loss(&mut tape, stacked, &w, config.weighting.zero_weight_epsilon)?)
                    }
                    Method::Aekd => unreachable!(),
                };
                let loss = match per_sample {
                    None => cls(&mut tape)?,
                    Some(kd_ps) => {
                        let kd_mean = tape.mean(kd_ps);
                        if kd.alpha < 1.0 {
                            let c = cls(&mut tape)?;
                            combined_loss(&mut tape, kd_mean, c, kd.alpha)?
                        } else {
                            kd_mean
                        }
                    }
                };
                let value = tape.value(loss).item()?;
                check_finite(value, epoch, step)?;
                tape.backward(loss)?;
                (value, bound.flatten_grads(&tape)?)
            };
            check_finite(loss_value, epoch, step)?;
            loss_sum += loss_value;
            opt.step(&mut student, &grad)?;
        }

        let metrics = monitor.map(|ds| evaluate(&student, ds)).transpose()?;
        let (w_deb, w_bias) = tally.means();
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            test_avg_acc: metrics.as_ref().map(|m| m.average_accuracy),
            test_wga: metrics.as_ref().map(|m| m.wga),
            group_accs: metrics.map(|m| m.per_group_accuracy),
            mean_weight_debiased: w_deb,
            mean_weight_biased: w_bias,
        });
    }

    let final_metrics = monitor.map(|ds| evaluate(&student, ds)).transpose()?;
    let report = DistillReport {
        method: config.method,
        seed: config.seed,
        epochs,
        final_metrics,
    };
    Ok((student, report))
}

/// Alignment and weight of every teacher on every sample of `ds`, at the
/// student's current parameters.
pub fn alignment_records(
    student: &Mlp,
    ds: &GroupedDataset,
    ensemble: &TeacherEnsemble,
    kd: &KdConfig,
    cfg: &WeightingConfig,
) -> Result<Vec<AlignmentRecord>> {
    let biased = ensemble
        .biased
        .as_ref()
        .ok_or_else(|| Error::Config("alignment needs a designated biased model".into()))?;
    let tl = ensemble
        .teachers
        .iter()
        .map(|t| t.logits(ds.x()))
        .collect::<Result<Vec<_>>>()?;
    let bl = biased.logits(ds.x())?;
    let (align, weights) = batch_alignments(student, ds.x(), &tl, &bl, kd, cfg)?;
    let m = tl.len();
    Ok((0..ds.len())
        .flat_map(|i| (0..m).map(move |t| (i, t)))
        .map(|(i, t)| AlignmentRecord {
            sample: i,
            teacher: t,
            alignment: align.at(i, t),
            weight: weights.at(i, t),
        })
        .collect())
}
