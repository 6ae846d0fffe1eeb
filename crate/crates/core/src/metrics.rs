//! Evaluation metrics and analysis exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::PatientSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Scalar;
use crate::seqlayout::ModalityCombination;
use crate::tasks::{HeadKind, Label, TaskSpec};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Walk groups from low to high score, counting negatives seen so far.
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut neg_below = 0usize;
    let mut wins = 0.0f64;
    for g in groups {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        let gn = g.len() - gp;
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over thresholds at each
/// distinct score, descending.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i]).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// `(macro F1, micro F1)` for single-label predictions. Classes with no
/// support and no predictions contribute 0 to the macro average.
pub fn f1_scores(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if n_classes == 0 {
        return Err(Error::OutOfRange("zero classes".into()));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::OutOfRange(format!("class {bad} with {n_classes} classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    let macro_f1 = (0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / n_classes as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok((macro_f1, micro_f1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilabelAuroc {
    pub macro_auroc: f64,
    pub micro_auroc: f64,
    /// Label columns skipped from the macro average because one class was
    /// missing.
    pub skipped: usize,
}

/// Macro and micro AUROC over a `samples x labels` score matrix.
pub fn multilabel_auroc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MultilabelAuroc> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("score and label matrices differ in rows".into()));
    }
    let width = scores.first().map_or(0, |r| r.len());
    if scores.iter().chain(std::iter::empty()).any(|r| r.len() != width) || labels.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("ragged multilabel matrix".into()));
    }
    let mut per = Vec::new();
    let mut skipped = 0;
    for j in 0..width {
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[j]).collect();
        match auroc(&s, &l) {
            Ok(v) => per.push(v),
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per.is_empty() {
        return Err(Error::UndefinedMetric("no label column has both classes".into()));
    }
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
    Ok(MultilabelAuroc {
        macro_auroc: per.iter().sum::<f64>() / per.len() as f64,
        micro_auroc: auroc(&flat_s, &flat_l)?,
        skipped,
    })
}

/// Named metric values for one task and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub task: String,
    pub n: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricBundle {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Main selection metric: AUROC for binary tasks, macro AUROC for
    /// multilabel tasks, micro F1 for multiclass tasks.
    pub fn primary(&self) -> Option<f64> {
        ["auroc", "macro_auroc", "micro_f1"].iter().find_map(|k| self.get(k))
    }
}

pub fn primary_metric_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Binary => "auroc",
        HeadKind::Multilabel => "macro_auroc",
        HeadKind::Multiclass => "micro_f1",
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Metric set of a task from per-sample probability vectors. Metrics that are
/// undefined on this split (e.g. one class only) are left out.
pub fn task_metrics(task: &TaskSpec, probs: &[Vec<f64>], labels: &[Label]) -> Result<MetricBundle> {
    if probs.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    for l in labels {
        l.check(task)?;
    }
    let mut values = BTreeMap::new();
    let mut put = |k: &str, v: Result<f64>| -> Result<()> {
        match v {
            Ok(x) => {
                values.insert(k.to_string(), x);
                Ok(())
            }
            Err(Error::UndefinedMetric(_)) => Ok(()),
            Err(e) => Err(e),
        }
    };
    match task.head_kind {
        HeadKind::Binary => {
            let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let l: Vec<bool> = labels.iter().map(|l| matches!(l, Label::Binary(true))).collect();
            put("auroc", auroc(&s, &l))?;
            put("auprc", auprc(&s, &l))?;
        }
        HeadKind::Multiclass => {
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => *c,
                    _ => unreachable!("checked above"),
                })
                .collect();
            if !pred.is_empty() {
                let (ma, mi) = f1_scores(&pred, &truth, task.label_dim)?;
                put("macro_f1", Ok(ma))?;
                put("micro_f1", Ok(mi))?;
            }
        }
        HeadKind::Multilabel => {
            let l: Vec<Vec<bool>> = labels
                .iter()
                .map(|l| match l {
                    Label::Multi(v) => v.clone(),
                    _ => unreachable!("checked above"),
                })
                .collect();
            match multilabel_auroc(probs, &l) {
                Ok(m) => {
                    put("macro_auroc", Ok(m.macro_auroc))?;
                    put("micro_auroc", Ok(m.micro_auroc))?;
                    put("skipped_labels", Ok(m.skipped as f64))?;
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(MetricBundle {
        task: task.name.clone(),
        n: labels.len(),
        values,
    })
}

/// One row of the expert-selection table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertStat {
    pub task: String,
    pub combination: String,
    pub expert: usize,
    pub frequency: f64,
}

/// Selection frequency of each expert per (task, combination): the share of
/// routing slots going to that expert, so each key sums to 1.
pub fn export_expert_stats<T: Scalar>(model: &Model<T>, samples: &[PatientSample]) -> Result<Vec<ExpertStat>> {
    let Some(moe) = &model.moe else {
        return Ok(Vec::new());
    };
    let n_e = moe.experts.len();
    let mut counts: BTreeMap<(usize, usize), (ModalityCombination, Vec<usize>)> = BTreeMap::new();
    for s in samples {
        let mut tape = crate::autodiff::Tape::new(&model.params);
        let out = model.forward(&mut tape, &s.inputs.cast(), s.task_id, None)?;
        for (c, (_, sel)) in out.combinations.iter().zip(&out.gates) {
            let e = counts
                .entry((s.task_id, c.canonical_index()))
                .or_insert_with(|| (*c, vec![0; n_e]));
            for &k in sel {
                e.1[k] += 1;
            }
        }
    }
    let mut rows = Vec::new();
    for ((task_id, _), (c, cnt)) in counts {
        let total: usize = cnt.iter().sum();
        let task = model.registry.get(task_id)?.name.clone();
        for (k, n) in cnt.into_iter().enumerate() {
            rows.push(ExpertStat {
                task: task.clone(),
                combination: c.members().to_string(),
                expert: k,
                frequency: n as f64 / total as f64,
            });
        }
    }
    Ok(rows)
}

/// First `n_per_task` patient representations of each task present in
/// `samples` (in input order): `(task, sample id, vector)`.
pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    samples: &[PatientSample],
    n_per_task: usize,
) -> Result<Vec<(String, String, Vec<f64>)>> {
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for s in samples {
        let k = taken.entry(s.task_id).or_default();
        if *k >= n_per_task {
            continue;
        }
        *k += 1;
        let v = model.representation(&s.inputs.cast(), s.task_id)?;
        rows.push((
            model.registry.get(s.task_id)?.name.clone(),
            s.id.clone(),
            v.into_iter().map(|x| x.to_f64_lossy()).collect(),
        ));
    }
    Ok(rows)
}

/// Per-sample fusion weights: `(task, sample id, combination, alpha)`.
pub fn export_alphas<T: Scalar>(model: &Model<T>, samples: &[PatientSample]) -> Result<Vec<(String, String, String, f64)>> {
    let mut rows = Vec::new();
    for s in samples {
        let mut tape = crate::autodiff::Tape::new(&model.params);
        let out = model.forward(&mut tape, &s.inputs.cast(), s.task_id, None)?;
        let task = model.registry.get(s.task_id)?.name.clone();
        for (c, a) in out.combinations.iter().zip(tape.value(out.alphas).iter()) {
            rows.push((task.clone(), s.id.clone(), c.members().to_string(), a.to_f64_lossy()));
        }
    }
    Ok(rows)
}

pub fn write_expert_csv<W: Write>(w: W, rows: &[ExpertStat]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record(["task", "combination", "expert", "frequency"])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_embeddings_csv<W: Write>(w: W, rows: &[(String, String, Vec<f64>)], width: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["task".to_string(), "id".to_string()];
    header.extend((0..width).map(|k| format!("s{k}")));
    out.write_record(&header)?;
    for (task, id, v) in rows {
        if v.len() != width {
            return Err(Error::Shape(format!("embedding width {} != {width}", v.len())));
        }
        let mut rec = vec![task.clone(), id.clone()];
        rec.extend(v.iter().map(|x| x.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_alphas_csv<W: Write>(w: W, rows: &[(String, String, String, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "id", "combination", "alpha"])?;
    for (task, id, c, a) in rows {
        out.write_record([task.as_str(), id.as_str(), c.as_str(), &a.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_metrics_csv<W: Write>(w: W, bundles: &[(String, MetricBundle)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "split", "n", "metric", "value"])?;
    for (split, b) in bundles {
        for (k, v) in &b.values {
            out.write_record([b.task.as_str(), split.as_str(), &b.n.to_string(), k.as_str(), &v.to_string()])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}
