//! Synthetic multimodal multitask data: generation, the JSONL dataset format,
//! loading with validation, and single-task mini-batches.
//!
//! Every synthetic patient has a latent vector `z ~ N(0, I)`. Each modality
//! is a noisy random linear view of `z`; labels threshold (or argmax) fixed
//! directions in latent space. Tasks that name the same `factor` share those
//! directions, which is where cross-task transfer comes from.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Scalar;
use crate::seqlayout::{ModalityId, ModalitySet};
use crate::tasks::{HeadKind, Label, TaskRegistry, TaskSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DATASET_META_FILE: &str = "dataset.json";

/// Raw per-modality inputs of one sample; `None` marks an absent modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModalityInputs<T> {
    /// `steps x F_t`
    pub ts: Option<Array2<T>>,
    /// `H x W x C`
    pub image: Option<Array3<T>>,
    /// `N_n x F_n`
    pub note: Option<Array2<T>>,
}

impl<T: Scalar> ModalityInputs<T> {
    pub fn present(&self) -> ModalitySet {
        let mut s = ModalitySet::EMPTY;
        if self.ts.is_some() {
            s = s.with(ModalityId::TimeSeries);
        }
        if self.image.is_some() {
            s = s.with(ModalityId::Image);
        }
        if self.note.is_some() {
            s = s.with(ModalityId::Note);
        }
        s
    }

    pub fn cast<U: Scalar>(&self) -> ModalityInputs<U> {
        let c = |x: &T| U::lit(x.to_f64_lossy());
        ModalityInputs {
            ts: self.ts.as_ref().map(|a| a.map(c)),
            image: self.image.as_ref().map(|a| a.map(c)),
            note: self.note.as_ref().map(|a| a.map(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSample {
    pub id: String,
    pub task_id: usize,
    pub label: Label,
    pub inputs: ModalityInputs<f32>,
}

/// Per-modality missing probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingRates {
    pub t: f64,
    pub i: f64,
    pub n: f64,
}

impl MissingRates {
    pub fn get(&self, m: ModalityId) -> f64 {
        match m {
            ModalityId::TimeSeries => self.t,
            ModalityId::Image => self.i,
            ModalityId::Note => self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTask {
    pub name: String,
    pub head_kind: HeadKind,
    pub label_dim: usize,
    pub loss_weight: f64,
    /// Latent directions are keyed by this name, so tasks sharing a factor
    /// share their label directions.
    pub factor: String,
    /// Decision threshold on the projected latent for binary and multilabel
    /// tasks; ignored for multiclass.
    #[serde(default)]
    pub threshold: f64,
    pub missing: MissingRates,
    /// Patients drawn for this task, as a multiple of `n_samples`.
    #[serde(default = "unit_scale")]
    pub sample_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl GenTask {
    fn new(name: &str, kind: HeadKind, dim: usize, weight: f64, factor: &str, threshold: f64, m: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            head_kind: kind,
            label_dim: dim,
            loss_weight: weight,
            factor: factor.into(),
            threshold,
            missing: MissingRates { t: m[0], i: m[1], n: m[2] },
            sample_scale: 1.0,
        }
    }

    /// Number of patients drawn for this task.
    pub fn n_patients(&self, n_samples: usize) -> usize {
        ((self.sample_scale * n_samples as f64).round() as usize).max(1)
    }
}

/// The six-task suite used by default.
pub fn default_suite() -> Vec<GenTask> {
    use HeadKind::*;
    vec![
        GenTask::new("ihm", Binary, 1, 0.2, "mortality", 0.6, [0.0, 0.7640, 0.0749]),
        GenTask::new("los", Multiclass, 10, 0.5, "stay", 0.0, [0.0, 0.8516, 0.0827]),
        GenTask::new("dec", Binary, 1, 0.2, "mortality", 0.9, [0.0, 0.8515, 0.0824]),
        GenTask::new("phe", Multilabel, 25, 1.0, "phenotype", 1.0, [0.0, 0.8194, 0.0830]),
        GenTask::new("rea", Binary, 1, 0.2, "readmission", 0.5, [0.0, 0.8238, 0.0806]),
        GenTask::new("dia", Multilabel, 8, 0.2, "finding", 0.8, [0.7634, 0.0, 0.3256]),
    ]
}

/// A note-dominant multiclass task used for extension experiments. It draws
/// ten times as many patients as the base suite, so its patients beyond
/// `n_samples` are unseen by the other tasks.
pub fn extension_task() -> GenTask {
    GenTask {
        sample_scale: 10.0,
        ..GenTask::new("drg", HeadKind::Multiclass, 8, 1.0, "drg", 0.0, [0.9, 0.9, 0.0])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenDims {
    pub t: Vec<usize>,
    pub i: Vec<usize>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub latent_dim: usize,
    /// Label directions live in the span of the first `label_rank` latent
    /// coordinates; the rest only add nuisance variance to the modalities.
    /// 0 uses the whole latent space.
    pub label_rank: usize,
    /// Weight of the pairwise term `(p.z)(q.z)` in every label score, where
    /// `p` and `q` span disjoint halves of the label subspace.
    pub interaction: f64,
    /// Latent coordinates each modality does not observe.
    pub hidden: HiddenDims,
    pub ts_features: usize,
    pub ts_min_steps: usize,
    pub ts_max_steps: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub note_features: usize,
    pub note_min_tokens: usize,
    pub note_max_tokens: usize,
    pub ts_noise: f64,
    /// Scale of the per-step linear drift in the time series.
    pub ts_drift: f64,
    pub image_noise: f64,
    pub note_noise: f64,
    pub label_noise: f64,
    /// Train / valid / test fractions over patients.
    pub split: [f64; 3],
    pub tasks: Vec<GenTask>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 2000,
            latent_dim: 16,
            label_rank: 4,
            interaction: 0.0,
            hidden: HiddenDims {
                t: vec![2, 3],
                i: Vec::new(),
                n: vec![0, 1],
            },
            ts_features: 76,
            ts_min_steps: 4,
            ts_max_steps: 8,
            image_size: 16,
            image_channels: 1,
            note_features: 32,
            note_min_tokens: 1,
            note_max_tokens: 2,
            ts_noise: 2.0,
            ts_drift: 0.5,
            image_noise: 2.0,
            note_noise: 2.0,
            label_noise: 0.3,
            split: [0.7, 0.1, 0.2],
            tasks: default_suite(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |f: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("gen.{f}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("n_samples", self.n_samples)?;
        pos("latent_dim", self.latent_dim)?;
        if self.label_rank > self.latent_dim {
            return Err(Error::config("gen.label_rank", "must not exceed latent_dim"));
        }
        if !self.interaction.is_finite() {
            return Err(Error::config("gen.interaction", "must be finite"));
        }
        for (m, dims) in [("t", &self.hidden.t), ("i", &self.hidden.i), ("n", &self.hidden.n)] {
            if let Some(d) = dims.iter().find(|&&d| d >= self.latent_dim) {
                return Err(Error::config(format!("gen.hidden.{m}"), format!("latent dim {d} out of range")));
            }
        }
        pos("ts_features", self.ts_features)?;
        pos("ts_min_steps", self.ts_min_steps)?;
        pos("image_size", self.image_size)?;
        pos("image_channels", self.image_channels)?;
        pos("note_features", self.note_features)?;
        pos("note_min_tokens", self.note_min_tokens)?;
        if self.ts_max_steps < self.ts_min_steps {
            return Err(Error::config("gen.ts_max_steps", "must be at least ts_min_steps"));
        }
        if self.note_max_tokens < self.note_min_tokens {
            return Err(Error::config("gen.note_max_tokens", "must be at least note_min_tokens"));
        }
        for (f, v) in [
            ("ts_noise", self.ts_noise),
            ("ts_drift", self.ts_drift),
            ("image_noise", self.image_noise),
            ("note_noise", self.note_noise),
            ("label_noise", self.label_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("gen.{f}"), "must be finite and non-negative"));
            }
        }
        if self.split.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("gen.split", "fractions must be non-negative and sum to 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("gen.tasks", "at least one task is required"));
        }
        let mut names = HashSet::new();
        for (k, t) in self.tasks.iter().enumerate() {
            if !names.insert(t.name.as_str()) {
                return Err(Error::config(format!("gen.tasks[{k}].name"), format!("duplicate task `{}`", t.name)));
            }
            for m in ModalityId::ALL {
                let r = t.missing.get(m);
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::config(
                        format!("gen.tasks[{k}].missing.{}", m.code()),
                        format!("rate {r} is outside [0, 1]"),
                    ));
                }
            }
            if ModalityId::ALL.iter().all(|&m| t.missing.get(m) >= 1.0) {
                return Err(Error::config(
                    format!("gen.tasks[{k}].missing"),
                    "every modality is always missing, so no sample can be drawn",
                ));
            }
            if !(t.sample_scale.is_finite() && t.sample_scale > 0.0) {
                return Err(Error::config(format!("gen.tasks[{k}].sample_scale"), "must be finite and positive"));
            }
            if !t.threshold.is_finite() {
                return Err(Error::config(format!("gen.tasks[{k}].threshold"), "must be finite"));
            }
        }
        self.registry()?;
        Ok(())
    }

    pub fn registry(&self) -> Result<TaskRegistry> {
        let mut reg = TaskRegistry::new();
        for t in &self.tasks {
            reg.register(&t.name, t.head_kind, t.label_dim, t.loss_weight)?;
        }
        Ok(reg)
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            ts_features: self.ts_features,
            image_size: self.image_size,
            image_channels: self.image_channels,
            note_features: self.note_features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub ts_features: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub note_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskData {
    pub train: Vec<PatientSample>,
    pub valid: Vec<PatientSample>,
    pub test: Vec<PatientSample>,
}

impl TaskData {
    pub fn split(&self, s: Split) -> &[PatientSample] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<PatientSample> {
        match s {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub dims: InputDims,
    pub tasks: Vec<TaskSpec>,
    /// Generator settings, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenConfig>,
}

/// Per-task splits indexed by task id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub registry: TaskRegistry,
    pub dims: InputDims,
    pub gen: Option<GenConfig>,
    pub tasks: Vec<TaskData>,
}

impl Dataset {
    pub fn task(&self, name: &str) -> Result<&TaskData> {
        let spec = self.registry.require(name)?;
        Ok(&self.tasks[spec.task_id])
    }

    pub fn task_by_id(&self, id: usize) -> Result<&TaskData> {
        self.registry.get(id)?;
        Ok(&self.tasks[id])
    }

    /// Keep only the named task, renumbered as task 0.
    pub fn only(&self, name: &str) -> Result<Dataset> {
        let spec = self.registry.require(name)?.clone();
        let mut reg = TaskRegistry::new();
        reg.register(&spec.name, spec.head_kind, spec.label_dim, spec.loss_weight)?;
        let mut data = self.tasks[spec.task_id].clone();
        for s in Split::ALL {
            for x in data.split_mut(s) {
                x.task_id = 0;
            }
        }
        Ok(Dataset {
            registry: reg,
            dims: self.dims,
            gen: self.gen.clone(),
            tasks: vec![data],
        })
    }

    /// Re-index onto `registry`. Tasks this dataset lacks get empty splits;
    /// shared tasks must agree on head kind and label width.
    pub fn aligned(&self, registry: &TaskRegistry) -> Result<Dataset> {
        let mut tasks = Vec::with_capacity(registry.len());
        for spec in registry.iter() {
            let mut data = match self.registry.by_name(&spec.name) {
                None => TaskData::default(),
                Some(mine) => {
                    if mine.head_kind != spec.head_kind || mine.label_dim != spec.label_dim {
                        return Err(Error::data(format!(
                            "task `{}` in the dataset does not match the registered head",
                            spec.name
                        )));
                    }
                    self.tasks[mine.task_id].clone()
                }
            };
            for s in Split::ALL {
                for x in data.split_mut(s) {
                    x.task_id = spec.task_id;
                }
            }
            tasks.push(data);
        }
        Ok(Dataset {
            registry: registry.clone(),
            dims: self.dims,
            gen: self.gen.clone(),
            tasks,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            dims: self.dims,
            tasks: self.registry.specs().to_vec(),
            gen: self.gen.clone(),
        }
    }
}

fn stream(seed: u64, key: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

/// Random unit vector supported on latent coordinates `lo..hi`.
fn unit_direction(seed: u64, key: &str, j: usize, dim: usize, lo: usize, hi: usize) -> Array1<f64> {
    let mut rng = stream(seed, &format!("direction/{key}"), j as u64);
    let v: Array1<f64> =
        Array1::from_shape_fn(dim, |k| if (lo..hi).contains(&k) { StandardNormal.sample(&mut rng) } else { 0.0 });
    let norm = v.dot(&v).sqrt().max(1e-12);
    v / norm
}

/// Fixed random projections shared by every task of one generated world.
struct World {
    a_t: Array2<f64>,
    b_t: Array2<f64>,
    a_i: Array2<f64>,
    a_n: Array2<f64>,
}

impl World {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = stream(cfg.seed, "world", 0);
        let std = 1.0 / (cfg.latent_dim as f64).sqrt();
        let px = cfg.image_size * cfg.image_size * cfg.image_channels;
        let hide = |mut a: Array2<f64>, dims: &[usize]| {
            for &d in dims {
                a.row_mut(d).fill(0.0);
            }
            a
        };
        let a_t = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.ts_features, std);
        let b_t = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.ts_features, std);
        let a_i = gaussian_matrix(&mut rng, cfg.latent_dim, px, std);
        let a_n = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.note_features, std);
        Self {
            a_t: hide(a_t, &cfg.hidden.t),
            b_t: hide(b_t, &cfg.hidden.t),
            a_i: hide(a_i, &cfg.hidden.i),
            a_n: hide(a_n, &cfg.hidden.n),
        }
    }
}

/// Latent vector of patient `p`; identical across tasks.
pub fn patient_latent(cfg: &GenConfig, p: usize) -> Array1<f64> {
    let mut rng = stream(cfg.seed, "patient", p as u64);
    Array1::from_shape_simple_fn(cfg.latent_dim, || StandardNormal.sample(&mut rng))
}

/// Score of label dimension `j` is `u_j.z + interaction * (p_j.z)(q_j.z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFunction {
    pub u: Array2<f64>,
    pub p: Array2<f64>,
    pub q: Array2<f64>,
}

impl LabelFunction {
    /// Noise-free scores of every label dimension.
    pub fn scores(&self, z: &Array1<f64>, interaction: f64) -> Array1<f64> {
        let lin = self.u.dot(z);
        let pz = self.p.dot(z);
        let qz = self.q.dot(z);
        lin + &(pz * qz * interaction)
    }
}

/// Label function of a task. Tasks with the same factor share it.
pub fn label_function(cfg: &GenConfig, task: &GenTask) -> LabelFunction {
    let rank = if cfg.label_rank == 0 { cfg.latent_dim } else { cfg.label_rank };
    let half = rank.div_ceil(2);
    let build = |key: String, lo: usize, hi: usize| {
        let mut out = Array2::zeros((task.label_dim, cfg.latent_dim));
        for j in 0..task.label_dim {
            out.row_mut(j).assign(&unit_direction(cfg.seed, &key, j, cfg.latent_dim, lo, hi));
        }
        out
    };
    LabelFunction {
        u: build(task.factor.clone(), 0, rank),
        p: build(format!("{}/p", task.factor), 0, half),
        q: build(format!("{}/q", task.factor), half.min(rank - 1), rank),
    }
}

fn assign_splits(cfg: &GenConfig, out: &mut [Split], block: u64) {
    let n = out.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, "split", block));
    let n_train = (cfg.split[0] * n as f64).round() as usize;
    let n_valid = ((cfg.split[1] * n as f64).round() as usize).min(n - n_train.min(n));
    for (rank, &p) in order.iter().enumerate() {
        out[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
}

/// Split assignment of every patient (patient-level, shared by all tasks).
/// The first `n_samples` patients are split together; patients beyond them,
/// drawn only by tasks with `sample_scale > 1`, are split as a second block
/// so the first block's assignment does not depend on the task list.
pub fn patient_splits(cfg: &GenConfig) -> Vec<Split> {
    let n = cfg.n_samples;
    let total = cfg.tasks.iter().map(|t| t.n_patients(n)).max().unwrap_or(n).max(n);
    let mut out = vec![Split::Test; total];
    assign_splits(cfg, &mut out[..n], 0);
    assign_splits(cfg, &mut out[n..], 1);
    out
}

fn draw_presence(rng: &mut ChaCha8Rng, rates: &MissingRates) -> ModalitySet {
    loop {
        let mut s = ModalitySet::EMPTY;
        for m in ModalityId::ALL {
            if rng.random::<f64>() >= rates.get(m) {
                s = s.with(m);
            }
        }
        if !s.is_empty() {
            return s;
        }
    }
}

fn noisy_view(rng: &mut ChaCha8Rng, mean: &Array1<f64>, noise: f64) -> Array1<f32> {
    mean.mapv(|m| {
        let e: f64 = StandardNormal.sample(rng);
        (m + noise * e) as f32
    })
}

fn make_label(rng: &mut ChaCha8Rng, cfg: &GenConfig, task: &GenTask, f: &LabelFunction, z: &Array1<f64>) -> Label {
    let proj: Vec<f64> = f
        .scores(z, cfg.interaction)
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(rng);
            v + cfg.label_noise * e
        })
        .collect();
    match task.head_kind {
        HeadKind::Binary => Label::Binary(proj[0] > task.threshold),
        HeadKind::Multilabel => Label::Multi(proj.iter().map(|&v| v > task.threshold).collect()),
        HeadKind::Multiclass => {
            let mut best = 0;
            for (k, &v) in proj.iter().enumerate() {
                if v > proj[best] {
                    best = k;
                }
            }
            Label::Class(best)
        }
    }
}

/// Draw one sample of `task` for patient `p`.
fn generate_sample(cfg: &GenConfig, world: &World, task_id: usize, task: &GenTask, f: &LabelFunction, p: usize) -> PatientSample {
    let z = patient_latent(cfg, p);
    let mut rng = stream(cfg.seed, &format!("sample/{}", task.name), p as u64);
    let label = make_label(&mut rng, cfg, task, f, &z);
    let present = draw_presence(&mut rng, &task.missing);
    let mut inputs = ModalityInputs::default();
    if present.contains(ModalityId::TimeSeries) {
        let steps = rng.random_range(cfg.ts_min_steps..=cfg.ts_max_steps);
        let base = z.dot(&world.a_t);
        let drift = z.dot(&world.b_t);
        let mut ts = Array2::zeros((steps, cfg.ts_features));
        for s in 0..steps {
            let frac = cfg.ts_drift * (s as f64 + 1.0) / steps as f64;
            let mean = &base + &(&drift * frac);
            ts.row_mut(s).assign(&noisy_view(&mut rng, &mean, cfg.ts_noise));
        }
        inputs.ts = Some(ts);
    }
    if present.contains(ModalityId::Image) {
        let flat = noisy_view(&mut rng, &z.dot(&world.a_i), cfg.image_noise);
        let img = flat
            .into_shape_with_order((cfg.image_size, cfg.image_size, cfg.image_channels))
            .expect("image size");
        inputs.image = Some(img);
    }
    if present.contains(ModalityId::Note) {
        let k = rng.random_range(cfg.note_min_tokens..=cfg.note_max_tokens);
        let mean = z.dot(&world.a_n);
        let mut note = Array2::zeros((k, cfg.note_features));
        for r in 0..k {
            note.row_mut(r).assign(&noisy_view(&mut rng, &mean, cfg.note_noise));
        }
        inputs.note = Some(note);
    }
    PatientSample {
        id: format!("{}-{p:06}", task.name),
        task_id,
        label,
        inputs,
    }
}

/// Generate the whole dataset in memory.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let world = World::new(cfg);
    let splits = patient_splits(cfg);
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for (tid, task) in cfg.tasks.iter().enumerate() {
        let f = label_function(cfg, task);
        let mut data = TaskData::default();
        for (p, split) in splits.iter().enumerate().take(task.n_patients(cfg.n_samples)) {
            data.split_mut(*split).push(generate_sample(cfg, &world, tid, task, &f, p));
        }
        tasks.push(data);
    }
    Ok(Dataset {
        registry,
        dims: cfg.dims(),
        gen: Some(cfg.clone()),
        tasks,
    })
}

/// One line of a split file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    task: String,
    label: Value,
    t: Option<Vec<Vec<f32>>>,
    i: Option<Vec<Vec<Vec<f32>>>>,
    n: Option<Vec<Vec<f32>>>,
}

fn rows_of(a: &ArrayView2<f32>) -> Vec<Vec<f32>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn label_json(label: &Label) -> Value {
    match label {
        Label::Binary(b) => Value::from(u8::from(*b)),
        Label::Class(c) => Value::from(*c),
        Label::Multi(v) => Value::from(v.iter().map(|&b| u8::from(b)).collect::<Vec<_>>()),
    }
}

fn record_of(s: &PatientSample, task: &str) -> Record {
    Record {
        id: s.id.clone(),
        task: task.to_string(),
        label: label_json(&s.label),
        t: s.inputs.ts.as_ref().map(|a| rows_of(&a.view())),
        i: s.inputs.image.as_ref().map(|img| {
            img.outer_iter().map(|row| rows_of(&row)).collect()
        }),
        n: s.inputs.note.as_ref().map(|a| rows_of(&a.view())),
    }
}

fn bit(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_u64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        _ => None,
    }
}

fn parse_label(v: &Value, task: &TaskSpec) -> std::result::Result<Label, String> {
    let label = match task.head_kind {
        HeadKind::Binary => Label::Binary(bit(v).ok_or_else(|| format!("binary label must be 0 or 1, got {v}"))?),
        HeadKind::Multiclass => Label::Class(
            v.as_u64()
                .ok_or_else(|| format!("class label must be a non-negative integer, got {v}"))? as usize,
        ),
        HeadKind::Multilabel => {
            let arr = v.as_array().ok_or_else(|| format!("multilabel label must be an array, got {v}"))?;
            Label::Multi(
                arr.iter()
                    .map(|x| bit(x).ok_or_else(|| format!("multilabel entries must be 0 or 1, got {x}")))
                    .collect::<std::result::Result<_, _>>()?,
            )
        }
    };
    label.check(task).map_err(|e| e.to_string())?;
    Ok(label)
}

fn matrix(rows: Vec<Vec<f32>>, width: usize, what: &str) -> std::result::Result<Array2<f32>, String> {
    if rows.is_empty() {
        return Err(format!("{what} has no rows"));
    }
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    for (r, row) in rows.into_iter().enumerate() {
        if row.len() != width {
            return Err(format!("{what} row {r} has width {}, expected {width}", row.len()));
        }
        flat.extend(row);
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(format!("{what} contains non-finite values"));
    }
    Ok(Array2::from_shape_vec((n, width), flat).expect("checked shape"))
}

fn sample_of(rec: Record, task: &TaskSpec, dims: &InputDims) -> std::result::Result<PatientSample, String> {
    if rec.task != task.name {
        return Err(format!("record task `{}` does not match file task `{}`", rec.task, task.name));
    }
    let label = parse_label(&rec.label, task)?;
    let ts = rec.t.map(|t| matrix(t, dims.ts_features, "time series")).transpose()?;
    let note = rec.n.map(|n| matrix(n, dims.note_features, "note")).transpose()?;
    let image = match rec.i {
        None => None,
        Some(rows) => {
            let (h, c) = (dims.image_size, dims.image_channels);
            if rows.len() != h {
                return Err(format!("image has {} rows, expected {h}", rows.len()));
            }
            let mut flat = Vec::with_capacity(h * h * c);
            for row in rows {
                flat.extend(matrix(row, c, "image row")?.into_iter());
            }
            if flat.len() != h * h * c {
                return Err(format!("image is not {h}x{h}x{c}"));
            }
            Some(Array3::from_shape_vec((h, h, c), flat).expect("checked shape"))
        }
    };
    let inputs = ModalityInputs { ts, image, note };
    if inputs.present().is_empty() {
        return Err("all modalities are absent".into());
    }
    Ok(PatientSample {
        id: rec.id,
        task_id: task.task_id,
        label,
        inputs,
    })
}

pub fn split_path(dir: &Path, task: &str, split: Split) -> PathBuf {
    dir.join(task).join(format!("{}.jsonl", split.name()))
}

pub fn write_split_file(path: &Path, samples: &[PatientSample], task: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, &record_of(s, task))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read one split file, validating every record against the task and the
/// dataset dimensions. Errors carry the 1-based line number.
pub fn load_split_file(path: &Path, task: &TaskSpec, dims: &InputDims) -> Result<Vec<PatientSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Data {
            path: Some(path.to_path_buf()),
            line: Some(k + 1),
            reason,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let sample = sample_of(rec, task, dims).map_err(fail)?;
        if !ids.insert(sample.id.clone()) {
            return Err(fail(format!("duplicate sample id `{}`", sample.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Write `dataset.json` plus one JSONL file per task and split.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(DATASET_META_FILE);
    let meta = serde_json::to_string_pretty(&ds.meta())?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    let mut written = vec![meta_path];
    for spec in ds.registry.iter() {
        for split in Split::ALL {
            let path = split_path(dir, &spec.name, split);
            write_split_file(&path, ds.tasks[spec.task_id].split(split), &spec.name)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(DATASET_META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: Some(path.clone()),
        line: Some(e.line()),
        reason: e.to_string(),
    })?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data {
            path: Some(path),
            line: None,
            reason: format!(
                "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                meta.format_version
            ),
        });
    }
    Ok(meta)
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let registry = TaskRegistry::from_specs(meta.tasks)?;
    let mut tasks = Vec::with_capacity(registry.len());
    for spec in registry.iter() {
        let mut data = TaskData::default();
        for split in Split::ALL {
            *data.split_mut(split) = load_split_file(&split_path(dir, &spec.name, split), spec, &meta.dims)?;
        }
        tasks.push(data);
    }
    Ok(Dataset {
        registry,
        dims: meta.dims,
        gen: meta.gen,
        tasks,
    })
}

/// Deterministic subsample keeping `round(fraction * n)` samples (at least
/// one when `n > 0`), in their original order.
pub fn subsample(samples: &[PatientSample], fraction: f64, seed: u64) -> Result<Vec<PatientSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("must be in (0, 1], got {fraction}")));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let keep = ((fraction * samples.len() as f64).round() as usize).clamp(1, samples.len());
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut stream(seed, "subsample", 0));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| samples[i].clone()).collect())
}

/// Padded single-task mini-batch. Absent modalities have valid length 0 and
/// all-zero padding; padded positions are never read by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientBatch {
    pub task_id: usize,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    /// `B x max_steps x F_t`
    pub ts: Array3<f32>,
    pub ts_len: Vec<usize>,
    /// `B x H x W x C`
    pub image: ndarray::Array4<f32>,
    pub image_present: Vec<bool>,
    /// `B x max_notes x F_n`
    pub note: Array3<f32>,
    pub note_len: Vec<usize>,
}

impl PatientBatch {
    pub fn from_samples(samples: &[&PatientSample], dims: &InputDims) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("batch"))?;
        let task_id = first.task_id;
        if samples.iter().any(|s| s.task_id != task_id) {
            return Err(Error::data("mixed tasks in one batch"));
        }
        let b = samples.len();
        let rows = |s: &PatientSample, m: ModalityId| match m {
            ModalityId::TimeSeries => s.inputs.ts.as_ref().map_or(0, |a| a.nrows()),
            ModalityId::Note => s.inputs.note.as_ref().map_or(0, |a| a.nrows()),
            ModalityId::Image => usize::from(s.inputs.image.is_some()),
        };
        let max_t = samples.iter().map(|s| rows(s, ModalityId::TimeSeries)).max().unwrap_or(0);
        let max_n = samples.iter().map(|s| rows(s, ModalityId::Note)).max().unwrap_or(0);
        let hs = dims.image_size;
        let mut ts = Array3::zeros((b, max_t, dims.ts_features));
        let mut image = ndarray::Array4::zeros((b, hs, hs, dims.image_channels));
        let mut note = Array3::zeros((b, max_n, dims.note_features));
        for (k, s) in samples.iter().enumerate() {
            if let Some(a) = &s.inputs.ts {
                ts.slice_mut(s![k, ..a.nrows(), ..]).assign(a);
            }
            if let Some(a) = &s.inputs.image {
                image.slice_mut(s![k, .., .., ..]).assign(a);
            }
            if let Some(a) = &s.inputs.note {
                note.slice_mut(s![k, ..a.nrows(), ..]).assign(a);
            }
        }
        Ok(Self {
            task_id,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            ts,
            ts_len: samples.iter().map(|s| rows(s, ModalityId::TimeSeries)).collect(),
            image,
            image_present: samples.iter().map(|s| s.inputs.image.is_some()).collect(),
            note,
            note_len: samples.iter().map(|s| rows(s, ModalityId::Note)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded inputs of sample `k`.
    pub fn inputs(&self, k: usize) -> ModalityInputs<f32> {
        ModalityInputs {
            ts: (self.ts_len[k] > 0).then(|| self.ts.slice(s![k, ..self.ts_len[k], ..]).to_owned()),
            image: self.image_present[k].then(|| self.image.slice(s![k, .., .., ..]).to_owned()),
            note: (self.note_len[k] > 0).then(|| self.note.slice(s![k, ..self.note_len[k], ..]).to_owned()),
        }
    }
}

/// Shuffled mini-batches of one task's samples for a given epoch. The last
/// batch may be smaller.
pub fn batch_iter(
    samples: &[PatientSample],
    task_id: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    dims: &InputDims,
) -> Result<Vec<PatientBatch>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    if let Some(bad) = samples.iter().find(|s| s.task_id != task_id) {
        return Err(Error::UnknownTask(format!("sample `{}` belongs to task #{}", bad.id, bad.task_id)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut stream(seed, &format!("batches/{task_id}"), epoch as u64));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&PatientSample> = chunk.iter().map(|&i| &samples[i]).collect();
            PatientBatch::from_samples(&refs, dims)
        })
        .collect()
}

/// Observed per-modality missing fraction over a set of samples.
pub fn missing_rates(samples: &[PatientSample]) -> MissingRates {
    let n = samples.len().max(1) as f64;
    let frac = |m: ModalityId| samples.iter().filter(|s| !s.inputs.present().contains(m)).count() as f64 / n;
    MissingRates {
        t: frac(ModalityId::TimeSeries),
        i: frac(ModalityId::Image),
        n: frac(ModalityId::Note),
    }
}
