//! Asynchronous single-task training: each epoch visits the tasks in turn and
//! every mini-batch updates the model for one task only.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{TaskOrder, TrainConfig};
use crate::data::{batch_iter, Dataset, ModalityInputs, PatientSample};
use crate::error::{Error, Result};
use crate::metrics::{primary_metric_name, task_metrics, MetricBundle};
use crate::model::{ForwardOutput, Model};
use crate::moe::cv_squared_with_grad;
use crate::params::{ParamGrads, ParamId, ParamStore, Scalar};
use crate::tasks::{task_loss, Label};

/// Adam with optional decoupled weight decay. Only tensors that received a
/// gradient are touched, each with its own step count, so a step on one task
/// leaves other tasks' tokens and heads bit-unchanged.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Array2<T>>>,
    v: Vec<Option<Array2<T>>>,
    t: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self::with(n_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn with(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }

    /// Grow state for parameters added after construction.
    pub fn resize(&mut self, n_params: usize) {
        self.m.resize(n_params, None);
        self.v.resize(n_params, None);
        self.t.resize(n_params, 0);
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        if self.m.len() < params.len() {
            self.resize(params.len());
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps, lr) = (T::one(), T::lit(self.eps), T::lit(self.lr));
        let decay = T::lit(self.lr * self.weight_decay);
        for (id, g) in grads.iter() {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                if self.weight_decay > 0.0 {
                    *p = *p - decay * *p;
                }
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Components of the objective averaged over a batch, before task weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLoss {
    /// `weight * (pred + beta * cov + balance)` (or the unweighted-regulariser
    /// variant); what the optimiser minimises.
    pub total: f64,
    pub pred: f64,
    pub cov: f64,
    pub balance: f64,
}

struct SamplePass<'p, T: Scalar> {
    tape: Tape<'p, T>,
    out: ForwardOutput,
    pred: Var,
}

fn run_samples<'p, T: Scalar>(
    model: &'p Model<T>,
    inputs: &[ModalityInputs<T>],
    labels: &[Label],
    task_id: usize,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Vec<SamplePass<'p, T>>> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Empty("batch"));
    }
    let spec = model.registry.get(task_id)?;
    let mut noise = noise;
    let mut passes = Vec::with_capacity(inputs.len());
    for (x, y) in inputs.iter().zip(labels) {
        let mut tape = Tape::new(&model.params);
        let n = noise.as_mut().map(|(s, r)| (*s, &mut **r));
        let out = model.forward(&mut tape, x, task_id, n)?;
        let pred = task_loss(&mut tape, out.probs, y, spec)?;
        passes.push(SamplePass { tape, out, pred });
    }
    Ok(passes)
}

/// Per-expert gate mass over all routed tokens in the batch.
fn expert_mass<T: Scalar>(passes: &[SamplePass<'_, T>], n_experts: usize) -> Vec<f64> {
    let mut mass = vec![0.0; n_experts];
    for p in passes {
        for (g, sel) in &p.out.gates {
            for (&e, w) in sel.iter().zip(p.tape.value(*g).iter()) {
                mass[e] += w.to_f64_lossy();
            }
        }
    }
    mass
}

fn objective_weights(cfg: &TrainConfig, weight: f64) -> (f64, f64, f64) {
    // (pred, cov, balance) multipliers
    if cfg.weight_regularizers {
        (weight, weight * cfg.beta, weight * cfg.balance_weight)
    } else {
        (weight, cfg.beta, cfg.balance_weight)
    }
}

fn summarize<T: Scalar>(
    passes: &[SamplePass<'_, T>],
    model: &Model<T>,
    task_id: usize,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<(BatchLoss, Option<Vec<f64>>)> {
    let b = passes.len() as f64;
    let (wp, wc, wb) = objective_weights(cfg, weight);
    let pred = passes.iter().map(|p| p.tape.scalar(p.pred).to_f64_lossy()).sum::<f64>() / b;
    let cov = passes
        .iter()
        .map(|p| p.out.cov.map_or(0.0, |c| p.tape.scalar(c).to_f64_lossy()))
        .sum::<f64>()
        / b;
    let (balance, bal_grad) = match &model.moe {
        Some(mp) if cfg.balance_weight > 0.0 => {
            let mass = expert_mass(passes, mp.experts.len());
            let (v, g) = cv_squared_with_grad(&mass)?;
            (v, Some(g))
        }
        _ => (0.0, None),
    };
    let total = wp * pred + wc * cov + wb * balance;
    let loss = BatchLoss {
        total,
        pred,
        cov,
        balance: cfg.balance_weight * balance,
    };
    if !(total.is_finite() && pred.is_finite() && cov.is_finite() && balance.is_finite()) {
        return Err(Error::NonFinite(format!(
            "batch objective for task `{}`: pred {pred}, cov {cov}, balance {balance}",
            model.registry.get(task_id).map_or("?", |t| t.name.as_str())
        )));
    }
    Ok((loss, bal_grad.map(|g| g.into_iter().map(|x| x * wb).collect())))
}

/// Objective of one batch without gradients.
pub fn batch_objective<T: Scalar>(
    model: &Model<T>,
    inputs: &[ModalityInputs<T>],
    labels: &[Label],
    task_id: usize,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<BatchLoss> {
    let passes = run_samples(model, inputs, labels, task_id, None)?;
    Ok(summarize(&passes, model, task_id, cfg, weight)?.0)
}

/// Objective and parameter gradients of one single-task batch.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    inputs: &[ModalityInputs<T>],
    labels: &[Label],
    task_id: usize,
    cfg: &TrainConfig,
    weight: f64,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(BatchLoss, ParamGrads<T>)> {
    let passes = run_samples(model, inputs, labels, task_id, noise)?;
    let (loss, bal_grad) = summarize(&passes, model, task_id, cfg, weight)?;
    let b = passes.len() as f64;
    let (wp, wc, _) = objective_weights(cfg, weight);
    let one = |c: f64| Array2::from_elem((1, 1), T::lit(c));
    let mut grads = ParamGrads::new(model.params.len());
    for p in &passes {
        let mut seeds = vec![(p.pred, one(wp / b))];
        if let Some(c) = p.out.cov {
            seeds.push((c, one(wc / b)));
        }
        if let Some(bg) = &bal_grad {
            for (g, sel) in &p.out.gates {
                let row = Array2::from_shape_vec((1, sel.len()), sel.iter().map(|&e| T::lit(bg[e])).collect())
                    .expect("gate row");
                seeds.push((*g, row));
            }
        }
        grads.merge(p.tape.backward(&seeds));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient for task `{}`",
            model.registry.get(task_id)?.name
        )));
    }
    Ok((loss, grads))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Parameters at the best validation score seen for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub log: Vec<LogRecord>,
    /// Indexed by task id; `None` for tasks not trained or never scored.
    pub best: Vec<Option<BestSnapshot<T>>>,
    pub steps: usize,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Training loss of `task` per epoch, in epoch order.
    pub fn train_losses(&self, task: &str) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.task == task && r.metric == "train_loss")
            .map(|r| r.value)
            .collect()
    }

    /// Model carrying the best-validation parameters of `task_id` (or the
    /// final parameters if none were recorded).
    pub fn best_model(&self, task_id: usize) -> Model<T> {
        let mut m = self.model.clone();
        if let Some(Some(b)) = self.best.get(task_id) {
            m.params = b.params.clone();
        }
        m
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Task ids to train; all registered tasks with training data if `None`.
    pub tasks: Option<Vec<usize>>,
    /// Sink for JSON-lines log records.
    pub log: Option<&'a mut dyn Write>,
    /// Keep a best-validation parameter snapshot per task.
    pub keep_best: bool,
    /// Skip validation passes entirely.
    pub skip_validation: bool,
}

fn emit(log: &mut Vec<LogRecord>, sink: &mut Option<&mut dyn Write>, rec: LogRecord) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<metrics log>", e))?;
    }
    log.push(rec);
    Ok(())
}

/// Train `model` on `ds` following the epoch-over-tasks schedule.
pub fn train(model: Model<f32>, ds: &Dataset, cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    model.check_dims(&ds.dims)?;
    let mut model = model;
    let task_ids: Vec<usize> = match &opts.tasks {
        Some(t) => t.clone(),
        None => (0..ds.registry.len()).filter(|&t| !ds.tasks[t].train.is_empty()).collect(),
    };
    if task_ids.is_empty() {
        return Err(Error::Empty("training tasks"));
    }
    for &t in &task_ids {
        let spec = ds.registry.get(t)?;
        let mine = model.registry.require(&spec.name)?;
        if mine.task_id != t || mine.head_kind != spec.head_kind || mine.label_dim != spec.label_dim {
            return Err(Error::UnknownTask(format!("task `{}` does not match the model registry", spec.name)));
        }
        if ds.tasks[t].train.is_empty() {
            return Err(Error::Empty("training split"));
        }
    }
    let mut adam = Adam::new(model.params.len(), cfg);
    let mut log = Vec::new();
    let mut sink = opts.log;
    let mut best: Vec<Option<BestSnapshot<f32>>> = vec![None; model.registry.len()];
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order = task_ids.clone();
        if cfg.task_order == TaskOrder::Shuffled {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9)));
        }
        for &tid in &order {
            let spec = model.registry.get(tid)?.clone();
            let weight = spec.loss_weight * cfg.task_weight_decay.powi(epoch as i32);
            let batches = batch_iter(&ds.tasks[tid].train, tid, cfg.batch_size, cfg.seed, epoch, &ds.dims)?;
            let mut rng = model.noise_rng(((epoch as u64) << 16) | tid as u64);
            let (mut sum_obj, mut sum_pred, mut n) = (0.0, 0.0, 0usize);
            for batch in &batches {
                let inputs: Vec<ModalityInputs<f32>> = (0..batch.len()).map(|k| batch.inputs(k)).collect();
                let noise = (cfg.router_noise > 0.0).then_some((cfg.router_noise, &mut rng));
                let (loss, grads) = batch_gradients(&model, &inputs, &batch.labels, tid, cfg, weight, noise)?;
                adam.step(&mut model.params, &grads);
                steps += 1;
                let bl = batch.len();
                sum_obj += (loss.pred + cfg.beta * loss.cov + loss.balance) * bl as f64;
                sum_pred += loss.pred * bl as f64;
                n += bl;
            }
            let rec = |metric: &str, value: f64| LogRecord {
                epoch,
                task: spec.name.clone(),
                metric: metric.to_string(),
                value,
            };
            emit(&mut log, &mut sink, rec("train_loss", sum_obj / n as f64))?;
            emit(&mut log, &mut sink, rec("train_pred_loss", sum_pred / n as f64))?;
            if opts.skip_validation {
                continue;
            }
            let eval_ids: Vec<usize> = if cfg.eval_all_tasks { task_ids.clone() } else { vec![tid] };
            for eid in eval_ids {
                let valid = &ds.tasks[eid].valid;
                if valid.is_empty() {
                    continue;
                }
                let bundle = evaluate(&model, valid, eid)?;
                let ename = model.registry.get(eid)?.name.clone();
                for (k, v) in &bundle.values {
                    emit(
                        &mut log,
                        &mut sink,
                        LogRecord {
                            epoch,
                            task: ename.clone(),
                            metric: format!("valid_{k}"),
                            value: *v,
                        },
                    )?;
                }
                let key = primary_metric_name(model.registry.get(eid)?.head_kind);
                if let (true, Some(v)) = (opts.keep_best, bundle.get(key)) {
                    let better = best[eid].as_ref().is_none_or(|b| v > b.value);
                    if better {
                        best[eid] = Some(BestSnapshot {
                            epoch,
                            metric: key.to_string(),
                            value: v,
                            params: model.params.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best,
        steps,
    })
}

/// Probabilities for every sample of one task.
pub fn predict_all<T: Scalar>(model: &Model<T>, samples: &[PatientSample], task_id: usize) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            if s.task_id != task_id {
                return Err(Error::UnknownTask(format!("sample `{}` is not from task #{task_id}", s.id)));
            }
            let p = model.predict(&s.inputs.cast(), task_id)?;
            Ok(p.into_iter().map(|x| x.to_f64_lossy()).collect())
        })
        .collect()
}

/// Metric bundle of `model` on a split of one task.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[PatientSample], task_id: usize) -> Result<MetricBundle> {
    let spec = model.registry.get(task_id)?;
    let probs = predict_all(model, samples, task_id)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label.clone()).collect();
    task_metrics(spec, &probs, &labels)
}

/// Test-split metrics of every trained task, each scored with its
/// best-validation snapshot when one exists.
pub fn test_metrics<T: Scalar>(outcome: &TrainOutcome<T>, ds: &Dataset) -> Result<Vec<MetricBundle>> {
    let mut out = Vec::new();
    for spec in ds.registry.iter() {
        let data = &ds.tasks[spec.task_id];
        if data.train.is_empty() || data.test.is_empty() {
            continue;
        }
        out.push(evaluate(&outcome.best_model(spec.task_id), &data.test, spec.task_id)?);
    }
    Ok(out)
}

/// Per-tensor agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub objective: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries
/// whose true gradient is essentially zero from dividing by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of the full objective on a batch against
/// central differences for every entry of every tensor.
pub fn grad_check(
    model: &Model<f64>,
    inputs: &[ModalityInputs<f64>],
    labels: &[Label],
    task_id: usize,
    cfg: &TrainConfig,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (loss, grads) = batch_gradients(model, inputs, labels, task_id, cfg, 1.0, None)?;
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(model.params.len());
    for (id, name, value) in model.params.iter() {
        let numel = value.len();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(value.dim()));
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for k in 0..numel {
            let orig = model.params.get(id).as_slice_memory_order().expect("contiguous")[k];
            let at = |probe: &mut Model<f64>, x: f64| -> Result<f64> {
                probe.params.get_mut(id).as_slice_memory_order_mut().expect("contiguous")[k] = x;
                Ok(batch_objective(probe, inputs, labels, task_id, cfg, 1.0)?.total)
            };
            let plus = at(&mut probe, orig + step)?;
            let minus = at(&mut probe, orig - step)?;
            at_restore(&mut probe, id, k, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice_memory_order().expect("contiguous")[k];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, floor));
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            numel,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        entries,
        objective: loss.total,
    })
}

fn at_restore(probe: &mut Model<f64>, id: ParamId, k: usize, v: f64) {
    probe.params.get_mut(id).as_slice_memory_order_mut().expect("contiguous")[k] = v;
}
