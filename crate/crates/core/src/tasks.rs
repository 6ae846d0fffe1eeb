//! Task registry, prediction heads and losses.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Binary,
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub head_kind: HeadKind,
    pub label_dim: usize,
    pub loss_weight: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("task.{}.{f}", self.name);
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '\n']) {
            return Err(Error::config(field("name"), "must be a plain nonempty identifier"));
        }
        if self.label_dim == 0 {
            return Err(Error::config(field("label_dim"), "must be positive"));
        }
        if self.head_kind == HeadKind::Binary && self.label_dim != 1 {
            return Err(Error::config(field("label_dim"), "binary tasks have label_dim 1"));
        }
        if self.head_kind == HeadKind::Multiclass && self.label_dim < 2 {
            return Err(Error::config(field("label_dim"), "multiclass tasks need at least 2 classes"));
        }
        if !(self.loss_weight.is_finite() && self.loss_weight > 0.0) {
            return Err(Error::config(field("loss_weight"), "must be positive"));
        }
        Ok(())
    }
}

/// Ordered set of tasks; ids are dense from 0 in registration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, head_kind: HeadKind, label_dim: usize, loss_weight: f64) -> Result<usize> {
        if self.by_name(name).is_some() {
            return Err(Error::DuplicateTask(name.to_string()));
        }
        let spec = TaskSpec {
            task_id: self.tasks.len(),
            name: name.to_string(),
            head_kind,
            label_dim,
            loss_weight,
        };
        spec.validate()?;
        self.tasks.push(spec);
        Ok(self.tasks.len() - 1)
    }

    /// Rebuild from specs, checking ids are dense and names unique.
    pub fn from_specs(specs: Vec<TaskSpec>) -> Result<Self> {
        let mut reg = TaskRegistry::new();
        for (i, s) in specs.into_iter().enumerate() {
            if s.task_id != i {
                return Err(Error::config(format!("task.{}.task_id", s.name), format!("expected {i}")));
            }
            reg.register(&s.name, s.head_kind, s.label_dim, s.loss_weight)?;
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or_else(|| Error::UnknownTask(format!("#{id}")))
    }

    pub fn by_name(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TaskSpec> {
        self.by_name(name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter()
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.tasks
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Binary(bool),
    Class(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn check(&self, task: &TaskSpec) -> Result<()> {
        match (self, task.head_kind) {
            (Label::Binary(_), HeadKind::Binary) => Ok(()),
            (Label::Class(c), HeadKind::Multiclass) if *c < task.label_dim => Ok(()),
            (Label::Class(c), HeadKind::Multiclass) => Err(Error::OutOfRange(format!(
                "class {c} for task `{}` with {} classes",
                task.name, task.label_dim
            ))),
            (Label::Multi(v), HeadKind::Multilabel) if v.len() == task.label_dim => Ok(()),
            (Label::Multi(v), HeadKind::Multilabel) => Err(Error::OutOfRange(format!(
                "{} labels for task `{}` with label_dim {}",
                v.len(),
                task.name,
                task.label_dim
            ))),
            (l, k) => Err(Error::OutOfRange(format!("label {l:?} does not fit a {k:?} task `{}`", task.name))),
        }
    }

    /// Targets as a `1 x label_dim` 0/1 row (one-hot for classes).
    pub fn targets<T: Scalar>(&self, label_dim: usize) -> Array2<T> {
        let mut out = Array2::zeros((1, label_dim));
        match self {
            Label::Binary(b) => out[[0, 0]] = if *b { T::one() } else { T::zero() },
            Label::Class(c) => out[[0, *c]] = T::one(),
            Label::Multi(v) => {
                for (i, b) in v.iter().enumerate() {
                    if *b {
                        out[[0, i]] = T::one();
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    /// `2d x label_dim`
    pub w: ParamId,
    pub b: ParamId,
}

/// Probabilities from the patient representation: sigmoid for binary and
/// multilabel heads, softmax for multiclass heads.
pub fn predict<T: Scalar>(tape: &mut Tape<'_, T>, s_p: Var, task: &TaskSpec, head: &HeadParams) -> Result<Var> {
    let w = tape.param(head.w);
    let b = tape.param(head.b);
    let logits = tape.linear(s_p, w, b)?;
    if tape.shape(logits).1 != task.label_dim {
        return Err(Error::Shape(format!("head width does not match task `{}`", task.name)));
    }
    Ok(match task.head_kind {
        HeadKind::Binary | HeadKind::Multilabel => tape.sigmoid(logits),
        HeadKind::Multiclass => tape.softmax(logits, T::one()),
    })
}

/// Mean BCE over label dims for binary/multilabel tasks, CE on the true
/// class for multiclass tasks.
pub fn task_loss<T: Scalar>(tape: &mut Tape<'_, T>, probs: Var, label: &Label, task: &TaskSpec) -> Result<Var> {
    label.check(task)?;
    match label {
        Label::Class(c) => tape.cross_entropy(probs, *c),
        _ => tape.bce(probs, label.targets(task.label_dim)),
    }
}

/// `lambda * (pred + beta * l_cov + balance)`.
pub fn total_loss(pred: f64, l_cov: f64, balance: f64, task: &TaskSpec, beta: f64) -> Result<f64> {
    for (name, v) in [("pred", pred), ("l_cov", l_cov), ("balance", balance), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(task.loss_weight * (pred + beta * l_cov + balance))
}
