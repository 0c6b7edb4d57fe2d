//! Joint drag/pressure loss, Adam with step decay, and evaluation metrics.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Graph, Scalar, Tensor, Var};
use crate::dataio::synthetic::sample_seed;
use crate::dataio::SurfaceSample;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::unet::{is_training_state, Model, PreparedSample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay γ applied every `decay_step` epochs.
    pub decay_factor: f64,
    pub decay_step: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Validation metrics every this many epochs (and after the last);
    /// 0 evaluates only after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 0.1,
            decay_step: 25,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            precision: Precision::F32,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_step == 0 {
            return Err(Error::config("decay_step", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `lr·γ^⌊epoch/step⌋`, applied as repeated multiplication so that decimal
/// schedules such as 1e−3 → 1e−4 → 1e−5 land on the nearest doubles.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    (0..epoch / config.decay_step).fold(config.learning_rate, |lr, _| lr * config.decay_factor)
}

/// `(ĉ − c)² + mean((P̂ − P)²)`.
pub fn joint_loss(pred_drag: f64, true_drag: f64, pred_pressure: &[f64], true_pressure: &[f64]) -> Result<f64> {
    if pred_pressure.len() != true_pressure.len() || pred_pressure.is_empty() {
        return Err(Error::shape(format!(
            "{} predicted and {} true pressures",
            pred_pressure.len(),
            true_pressure.len()
        )));
    }
    let n = pred_pressure.len() as f64;
    let p: f64 = pred_pressure
        .iter()
        .zip(true_pressure)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok((pred_drag - true_drag).powi(2) + p)
}

/// Graph version of [`joint_loss`]; `pred_drag` holds one element and
/// `pred_pressure` is `[1, N]`.
pub fn joint_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred_drag: Var,
    true_drag: f64,
    pred_pressure: Var,
    true_pressure: &Tensor<T>,
) -> Result<Var> {
    let d_shape = g.shape(pred_drag).to_vec();
    let t = g.leaf(Tensor::full(&d_shape, T::from_f64_lossy(true_drag)));
    let dd = g.sub(pred_drag, t)?;
    let dd = g.square(dd);
    let drag = g.sum_all(dd);
    let tp = g.leaf(true_pressure.clone());
    let dp = g.sub(pred_pressure, tp)?;
    let dp = g.square(dp);
    let pressure = g.mean_all(dp)?;
    let p = g.reshape(pressure, &[])?;
    g.add(drag, p)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails on non-finite gradients before
/// touching anything.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("parameter {} is {:?} but its gradient is {:?}", i, p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", i)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
    let step_size = T::from_f64_lossy(lr / c1);
    let c2_sqrt = T::from_f64_lossy(c2.sqrt());
    let eps = T::from_f64_lossy(ADAM_EPS);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// A prepared input with its labels.
#[derive(Clone, Debug)]
pub struct Example<T: Scalar> {
    pub input: PreparedSample<T>,
    pub drag: f64,
    /// `[1, N]` normalized pressures.
    pub pressure: Tensor<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(model: &Model<T>, sample: &SurfaceSample) -> Result<Self> {
        let input = model.prepare(sample)?;
        let n = sample.pressure.len();
        if n != input.num_points() {
            return Err(Error::shape(format!("{} pressure labels for {} points", n, input.num_points())));
        }
        let pressure = Tensor::new(vec![1, n], sample.pressure.iter().map(|&p| T::from_f64_lossy(p)).collect())?;
        Ok(Self {
            input,
            drag: sample.drag,
            pressure,
        })
    }
}

pub fn prepare_examples<T: Scalar>(model: &Model<T>, samples: &[SurfaceSample]) -> Result<Vec<Example<T>>> {
    samples.par_iter().map(|s| Example::new(model, s)).collect()
}

/// Loss and parameter gradients for one example.
pub fn example_gradients<T: Scalar>(model: &Model<T>, ex: &Example<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut graph = Graph::new();
    let mut ctx = Ctx::new(&mut graph, &model.store);
    let out = model.forward_graph(&mut ctx, &ex.input)?;
    let loss = joint_loss_graph(ctx.graph, out.drag, ex.drag, out.pressure, &ex.pressure)?;
    let value = ctx.graph.value(loss).item().to_f64_lossy();
    let grads = ctx.graph.backward(loss)?;
    Ok((value, ctx.param_grads(&grads)))
}

/// Error statistics of one quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mse: f64,
    pub mae: f64,
    pub max_ae: f64,
    /// `None` when the targets have no variance.
    pub r2: Option<f64>,
}

impl ErrorStats {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
        }
        let n = pred.len() as f64;
        let mut se = 0.0;
        let mut ae = 0.0;
        let mut max_ae: f64 = 0.0;
        for (p, t) in pred.iter().zip(truth) {
            let e = p - t;
            se += e * e;
            ae += e.abs();
            max_ae = max_ae.max(e.abs());
        }
        let mean = truth.iter().sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
        let r2 = (ss_tot > 0.0).then(|| 1.0 - se / ss_tot);
        Ok(Self {
            mse: se / n,
            mae: ae / n,
            max_ae,
            r2,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub drag: ErrorStats,
    pub pressure: ErrorStats,
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    pub value: Option<f64>,
}

impl Metrics {
    pub fn records(&self, split: &str) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (name, s) in [("drag", &self.drag), ("pressure", &self.pressure)] {
            for (m, v) in [
                ("mse", Some(s.mse)),
                ("mae", Some(s.mae)),
                ("max_ae", Some(s.max_ae)),
                ("r2", s.r2),
            ] {
                out.push(MetricRecord {
                    metric: format!("{}_{}", name, m),
                    split: split.to_string(),
                    value: v,
                });
            }
        }
        out
    }
}

/// Drag metrics over examples, pressure metrics over all points.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Example<T>]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation needs at least one example"));
    }
    let inputs: Vec<PreparedSample<T>> = data.iter().map(|e| e.input.clone()).collect();
    let preds = model.forward_batch(&inputs)?;
    metrics_from(&preds.iter().map(|p| (p.drag, p.pressure.clone())).collect::<Vec<_>>(), data)
}

fn metrics_from<T: Scalar>(preds: &[(f64, Vec<f64>)], data: &[Example<T>]) -> Result<Metrics> {
    let pd: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let td: Vec<f64> = data.iter().map(|e| e.drag).collect();
    let pp: Vec<f64> = preds.iter().flat_map(|p| p.1.iter().copied()).collect();
    let tp: Vec<f64> = data.iter().flat_map(|e| e.pressure.to_f64_vec()).collect();
    Ok(Metrics {
        drag: ErrorStats::compute(&pd, &td)?,
        pressure: ErrorStats::compute(&pp, &tp)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean joint loss over the epoch's examples, measured before each
    /// batch's update.
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_train: Metrics,
    pub final_val: Option<Metrics>,
}

/// Optimizer state plus the index of the next epoch to run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub adam: AdamState<T>,
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            adam: AdamState::new(model.store.tensors()),
            epoch: 0,
        }
    }
}

const EPOCH_KEY: &str = "train.epoch";
const STEP_KEY: &str = "train.adam_step";

fn counter<T: Scalar>(v: u64) -> Result<Tensor<f32>> {
    if v > 1 << 24 {
        return Err(Error::Checkpoint(format!("counter {} exceeds the exact f32 range", v)));
    }
    let _ = T::zero();
    Ok(Tensor::scalar(v as f32))
}

/// Parameters, Adam moments and the epoch counter in one checkpoint file.
/// Values are stored as f32.
pub fn save_training<T: Scalar>(path: &Path, model: &Model<T>, state: &TrainState<T>) -> Result<()> {
    let mut named = model.store.to_named_f32();
    for id in model.store.ids() {
        let name = model.store.name(id);
        named.push((format!("adam.m.{}", name), state.adam.m[id.index()].cast()));
        named.push((format!("adam.v.{}", name), state.adam.v[id.index()].cast()));
    }
    named.push((EPOCH_KEY.to_string(), counter::<T>(state.epoch as u64)?));
    named.push((STEP_KEY.to_string(), counter::<T>(state.adam.step)?));
    save_checkpoint(path, &named)
}

/// Restore parameters and optimizer state written by [`save_training`].
pub fn load_training<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<TrainState<T>> {
    let named = load_checkpoint(path)?;
    let params: Vec<_> = named.iter().filter(|(n, _)| !is_training_state(n)).cloned().collect();
    model.store.load_named(&params)?;
    let find = |key: &str| {
        named
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", key)))
    };
    let mut state = TrainState::new(model);
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        for (prefix, slot) in [("adam.m", &mut state.adam.m), ("adam.v", &mut state.adam.v)] {
            let t = find(&format!("{}.{}", prefix, name))?;
            if t.shape() != slot[id.index()].shape() {
                return Err(Error::Checkpoint(format!("{}.{} has shape {:?}", prefix, name, t.shape())));
            }
            slot[id.index()] = t.cast();
        }
    }
    state.epoch = find(EPOCH_KEY)?.item() as usize;
    state.adam.step = find(STEP_KEY)?.item() as u64;
    Ok(state)
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch)));
    order
}

/// Run epochs `state.epoch..config.epochs`. Each epoch shuffles the
/// training set, splits it into batches (the last one may be short), and
/// takes one Adam step per batch on the batch-mean loss. Per-example
/// gradients are summed in batch order. One JSON object per epoch goes to
/// `log`. `on_epoch` may stop the run early by returning `Break`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    config: &TrainConfig,
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model<T>) -> ControlFlow<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut records = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, config);
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let model_ref = &*model;
            let results: Vec<(f64, Vec<Tensor<T>>)> = batch
                .par_iter()
                .map(|&i| example_gradients(model_ref, &train_set[i]))
                .collect::<Result<_>>()?;
            let mut total: Option<Vec<Tensor<T>>> = None;
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss in epoch {} batch {}", epoch, b)));
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            let grads: Vec<Tensor<T>> = total.unwrap().iter().map(|g| g.scale(scale)).collect();
            adam_step(model.store.tensors_mut(), &grads, &mut state.adam, lr)?;
        }
        state.epoch += 1;
        let last = state.epoch == config.epochs;
        let due = config.eval_every > 0 && state.epoch % config.eval_every == 0;
        let val = if !val_set.is_empty() && (due || last) {
            Some(evaluate(model, val_set)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(log, "{}", line).map_err(|e| Error::io("<training log>", e))?;
        let flow = on_epoch(&record, model);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    let final_train = evaluate(model, train_set)?;
    let final_val = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(model, val_set)?)
    };
    Ok(TrainReport {
        epochs: records,
        final_train,
        final_val,
    })
}
