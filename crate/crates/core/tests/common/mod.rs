//! Oracles, fixtures and property probes shared by the integration tests and
//! the acceptance harness. The oracles are written independently of the code
//! they check.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexcare::config::ModelConfig;
use flexcare::data::ModalityInputs;
use flexcare::params::Scalar;
use flexcare::tasks::{HeadKind, Label, TaskRegistry};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Presence patterns as bitmasks over (t, i, n).
pub const PATTERNS: [u8; 7] = [0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111];

pub fn small_config(d: usize, layers: usize, experts: usize, k: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        layers,
        heads: 2,
        experts,
        top_k: k,
        ts_features: 5,
        ts_max_steps: 6,
        image_size: 4,
        image_channels: 1,
        patch_size: 2,
        note_features: 3,
        note_max_tokens: 3,
        ..ModelConfig::default()
    }
}

pub fn three_tasks() -> TaskRegistry {
    let mut r = TaskRegistry::new();
    r.register("bin", HeadKind::Binary, 1, 1.0).unwrap();
    r.register("cls", HeadKind::Multiclass, 3, 1.0).unwrap();
    r.register("mul", HeadKind::Multilabel, 4, 1.0).unwrap();
    r
}

pub fn random_label<R: Rng>(r: &mut R, kind: HeadKind, dim: usize) -> Label {
    match kind {
        HeadKind::Binary => Label::Binary(r.random_bool(0.5)),
        HeadKind::Multiclass => Label::Class(r.random_range(0..dim)),
        HeadKind::Multilabel => Label::Multi((0..dim).map(|_| r.random_bool(0.5)).collect()),
    }
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    // Box-Muller keeps this file free of distribution crates
    let u1: f64 = r.random_range(1e-12..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random inputs for `cfg` with the modalities of `bits` present.
pub fn random_inputs<T: Scalar, R: Rng>(r: &mut R, cfg: &ModelConfig, bits: u8) -> ModalityInputs<T> {
    let lit = |x: f64| T::lit(x);
    let ts = (bits & 1 != 0).then(|| {
        let n = r.random_range(1..=cfg.ts_max_steps);
        Array2::from_shape_simple_fn((n, cfg.ts_features), || lit(normal(r)))
    });
    let image = (bits & 2 != 0).then(|| {
        Array3::from_shape_simple_fn((cfg.image_size, cfg.image_size, cfg.image_channels), || lit(normal(r)))
    });
    let note = (bits & 4 != 0).then(|| {
        let n = r.random_range(1..=cfg.note_max_tokens);
        Array2::from_shape_simple_fn((n, cfg.note_features), || lit(normal(r)))
    });
    ModalityInputs { ts, image, note }
}

/// What each sequence position stands for, as a set of modality bits:
/// `None` for the task token.
fn position_sets(bits: u8, counts: [usize; 3]) -> Vec<(Option<u8>, bool)> {
    // (members, is_combination)
    let mut out = vec![(None, false)];
    let mut combos: Vec<u8> = (1u8..8).filter(|c| c & !bits == 0).collect();
    // canonical order t, i, n, ti, tn, in, tin
    let rank = |c: u8| match c {
        0b001 => 0,
        0b010 => 1,
        0b100 => 2,
        0b011 => 3,
        0b101 => 4,
        0b110 => 5,
        _ => 6,
    };
    combos.sort_by_key(|&c| rank(c));
    out.extend(combos.into_iter().map(|c| (Some(c), true)));
    for m in 0..3 {
        if bits & (1 << m) != 0 {
            out.extend(std::iter::repeat_n((Some(1u8 << m), false), counts[m]));
        }
    }
    out
}

/// Brute-force additive mask: entry `(i, j)` is 0 when the task row is `i`,
/// or when `phi(j)` is a member of / equal to `phi(i)` with `j` not the task
/// token; `-1e9` otherwise. A modality token's `phi` is its singleton set.
pub fn mask_oracle(bits: u8, counts: [usize; 3]) -> Vec<Vec<f64>> {
    let pos = position_sets(bits, counts);
    let n = pos.len();
    let mut m = vec![vec![-1e9; n]; n];
    for i in 0..n {
        for j in 0..n {
            let ok = match (pos[i], pos[j]) {
                ((None, _), _) => true,
                (_, (None, _)) => false,
                ((Some(si), ci), (Some(sj), cj)) => {
                    if i == j {
                        true
                    } else if cj {
                        // another combination slot is never a member
                        false
                    } else if ci {
                        sj & si == sj
                    } else {
                        si == sj
                    }
                }
            };
            if ok {
                m[i][j] = 0.0;
            }
        }
    }
    m
}

/// Double-loop token covariance with mean centring over feature columns.
pub fn cov_oracle(z: &Array2<f64>) -> Array2<f64> {
    let (n, d) = z.dim();
    let mut means = vec![0.0; n];
    for i in 0..n {
        for j in 0..d {
            means[i] += z[[i, j]];
        }
        means[i] /= d as f64;
    }
    let mut c = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += (z[[a, j]] - means[a]) * (z[[b, j]] - means[b]);
            }
            c[[a, b]] = s / (d as f64 - 1.0);
        }
    }
    c
}

/// Off-diagonal squared covariance normalised by `(n-1)^2`.
pub fn regularizer_oracle(z: &Array2<f64>) -> f64 {
    let c = cov_oracle(z);
    let n = c.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += c[[i, j]] * c[[i, j]];
            }
        }
    }
    s / ((n - 1) as f64).powi(2)
}

/// AUROC by comparing every positive with every negative; ties score 1/2.
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Average precision over distinct thresholds: for each distinct score `t`
/// (descending), precision at `score >= t` times the recall gained there.
pub fn auprc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let mut tp = 0usize;
        let mut k = 0usize;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                k += 1;
                if *l {
                    tp += 1;
                }
            }
        }
        let recall = tp as f64 / pos as f64;
        ap += (tp as f64 / k as f64) * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

/// Largest absolute difference between two equally shaped arrays.
pub fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .fold(0.0, f64::max)
}

use flexcare::autodiff::Tape;
use flexcare::config::TrainConfig;
use flexcare::model::Model;
use flexcare::seqlayout::ModalityId;
use flexcare::training::{grad_check, GradCheckReport};

/// Row values of a tape variable.
fn rows<T: Scalar>(tape: &Tape<'_, T>, v: flexcare::autodiff::Var) -> Array2<f64> {
    tape.value(v).mapv(|x| x.to_f64_lossy())
}

/// Over `n` random full-modality inputs, forward once as task 0 and once as
/// task 1. Returns `(largest change in combination / modality outputs,
/// smallest change in the task output)`.
pub fn task_agnosticism(n: usize, seed: u64) -> (f64, f64) {
    let cfg = small_config(16, 2, 3, 2);
    let model = Model::<f64>::new(cfg.clone(), three_tasks(), seed).unwrap();
    let mut r = rng(seed);
    let (mut shared, mut task) = (0.0f64, f64::INFINITY);
    for _ in 0..n {
        let bits = PATTERNS[r.random_range(0..PATTERNS.len())];
        let x = random_inputs::<f64, _>(&mut r, &cfg, bits);
        let mut ta = Tape::new(&model.params);
        let a = model.forward(&mut ta, &x, 0, None).unwrap();
        let mut tb = Tape::new(&model.params);
        let b = model.forward(&mut tb, &x, 1, None).unwrap();
        shared = shared.max(max_abs_diff(&rows(&ta, a.z_comb.unwrap()), &rows(&tb, b.z_comb.unwrap())));
        for m in 0..3 {
            if let (Some(u), Some(v)) = (a.modality_outputs[m], b.modality_outputs[m]) {
                shared = shared.max(max_abs_diff(&rows(&ta, u), &rows(&tb, v)));
            }
        }
        task = task.min(max_abs_diff(&rows(&ta, a.z_task), &rows(&tb, b.z_task)));
    }
    (shared, task)
}

/// Perturb one present modality's raw input and compare combination outputs.
/// Returns `(largest change for combinations without it, smallest change for
/// combinations with it)`.
pub fn combination_isolation(n: usize, seed: u64) -> (f64, f64) {
    let cfg = small_config(16, 2, 3, 2);
    let model = Model::<f64>::new(cfg.clone(), three_tasks(), seed).unwrap();
    let mut r = rng(seed ^ 0x55);
    let (mut outside, mut inside) = (0.0f64, f64::INFINITY);
    for k in 0..n {
        let bits = PATTERNS[k % PATTERNS.len()];
        let x = random_inputs::<f64, _>(&mut r, &cfg, bits);
        for m in ModalityId::ALL {
            if bits & (1 << m.index()) == 0 {
                continue;
            }
            let mut y = x.clone();
            match m {
                ModalityId::TimeSeries => y.ts.as_mut().unwrap().mapv_inplace(|v| v + 0.5),
                ModalityId::Image => y.image.as_mut().unwrap().mapv_inplace(|v| -v),
                ModalityId::Note => y.note.as_mut().unwrap().mapv_inplace(|v| v * 2.0 + 0.3),
            }
            let mut ta = Tape::new(&model.params);
            let a = model.forward(&mut ta, &x, 0, None).unwrap();
            let mut tb = Tape::new(&model.params);
            let b = model.forward(&mut tb, &y, 0, None).unwrap();
            let za = rows(&ta, a.z_comb.unwrap());
            let zb = rows(&tb, b.z_comb.unwrap());
            for (row, c) in a.combinations.iter().enumerate() {
                let diff = (0..za.ncols()).map(|j| (za[[row, j]] - zb[[row, j]]).abs()).fold(0.0, f64::max);
                if c.contains(m) {
                    inside = inside.min(diff);
                } else {
                    outside = outside.max(diff);
                }
            }
        }
    }
    (outside, inside)
}

/// Smallest gap between the k-th and (k+1)-th router logit over every
/// combination of every input.
pub fn router_margin(model: &Model<f64>, inputs: &[ModalityInputs<f64>], task_id: usize) -> f64 {
    let w1 = model.params.get(model.params.id("moe.router.w1").unwrap()).clone();
    let w2 = model.params.get(model.params.id("moe.router.w2").unwrap()).clone();
    let k = model.config.top_k;
    let mut margin = f64::INFINITY;
    for x in inputs {
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, x, task_id, None).unwrap();
        let zc = rows(&tape, out.z_comb.unwrap());
        let zt = rows(&tape, out.z_task);
        let logits = zc.dot(&w1) + zt.dot(&w2);
        for row in logits.rows() {
            let mut v: Vec<f64> = row.to_vec();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if v.len() > k {
                margin = margin.min(v[k - 1] - v[k]);
            }
        }
    }
    margin
}

/// Central-difference check of every tensor for every task head at d=8, L=1,
/// N^e=3, k=2 in double precision. Batches always include a sample with all
/// three modalities so every embedder and combination token is exercised;
/// draws whose router logits come within `1e-3` of a top-k tie are redrawn.
pub fn gradient_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let cfg = small_config(8, 1, 3, 2);
    let registry = three_tasks();
    let train = TrainConfig {
        beta: 0.5,
        balance_weight: 0.1,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    for spec in registry.iter() {
        let mut attempt = 0u64;
        loop {
            let s = seed.wrapping_mul(31).wrapping_add(attempt * 1000 + spec.task_id as u64);
            let mut r = rng(s);
            let model = Model::<f64>::new(cfg.clone(), registry.clone(), s).unwrap();
            let mut inputs = vec![random_inputs::<f64, _>(&mut r, &cfg, 0b111)];
            for _ in 0..3 {
                let bits = PATTERNS[r.random_range(0..PATTERNS.len())];
                inputs.push(random_inputs::<f64, _>(&mut r, &cfg, bits));
            }
            let labels: Vec<Label> = inputs.iter().map(|_| random_label(&mut r, spec.head_kind, spec.label_dim)).collect();
            if router_margin(&model, &inputs, spec.task_id) < 1e-3 {
                attempt += 1;
                continue;
            }
            let report = grad_check(&model, &inputs, &labels, spec.task_id, &train, GRAD_STEP, GRAD_FLOOR).unwrap();
            out.push((spec.name.clone(), report));
            break;
        }
    }
    out
}

/// Denominator floor of the relative error used by the gradient suite.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central-difference step of the gradient suite.
pub const GRAD_STEP: f64 = 1e-5;

use flexcare::data::{generate, missing_rates, GenConfig, InputDims, PatientSample, Split};

/// Small synthetic suite: six default tasks at `n` samples each, with
/// narrow inputs so models stay tiny.
pub fn tiny_gen(seed: u64, n: usize) -> GenConfig {
    GenConfig {
        seed,
        n_samples: n,
        ts_features: 5,
        image_size: 4,
        note_features: 3,
        ..GenConfig::default()
    }
}

pub fn config_for(dims: &InputDims, d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        layers: 1,
        heads: 2,
        experts: 3,
        top_k: 2,
        ts_features: dims.ts_features,
        image_size: dims.image_size,
        image_channels: dims.image_channels,
        patch_size: 2,
        note_features: dims.note_features,
        ..ModelConfig::default()
    }
}

/// Largest gap between configured and realised missing rates over all tasks
/// and modalities, for `n` samples per task.
pub fn missingness_gap(n: usize, seed: u64) -> f64 {
    let cfg = GenConfig {
        seed,
        n_samples: n,
        ..GenConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in cfg.tasks.iter().enumerate() {
        let all: Vec<PatientSample> = Split::ALL.iter().flat_map(|&s| ds.tasks[k].split(s).to_vec()).collect();
        let got = missing_rates(&all);
        for m in ModalityId::ALL {
            worst = worst.max((got.get(m) - t.missing.get(m)).abs());
        }
    }
    worst
}

use flexcare::autodiff::gelu;
use flexcare::metrics::{auprc, auroc};
use flexcare::moe::{moe_forward, ExpertParams, MoEParams};
use flexcare::params::{normal_init, ParamStore};

fn dense_expert(x: &Array2<f64>, w1: &Array2<f64>, b1: &Array2<f64>, w2: &Array2<f64>, b2: &Array2<f64>) -> Array2<f64> {
    let h = (x.dot(w1) + b1).mapv(gelu);
    h.dot(w2) + b2
}

/// Largest gap between `moe_forward` and a dense sum over every expert with
/// non-selected gates zeroed, over random instances with `d <= 8` and
/// `N^e <= 4`.
pub fn moe_dense_gap(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = r.random_range(2..=8);
        let n_e = r.random_range(2..=4);
        let k = r.random_range(1..=n_e);
        let mut store = ParamStore::<f64>::new();
        let mut experts = Vec::new();
        for e in 0..n_e {
            experts.push(ExpertParams {
                w1: store.add(format!("e{e}.w1"), normal_init(&mut r, d, 2 * d, 0.5)).unwrap(),
                b1: store.add(format!("e{e}.b1"), normal_init(&mut r, 1, 2 * d, 0.5)).unwrap(),
                w2: store.add(format!("e{e}.w2"), normal_init(&mut r, 2 * d, d, 0.5)).unwrap(),
                b2: store.add(format!("e{e}.b2"), normal_init(&mut r, 1, d, 0.5)).unwrap(),
            });
        }
        let rw1 = store.add("rw1", normal_init(&mut r, d, n_e, 1.0)).unwrap();
        let rw2 = store.add("rw2", normal_init(&mut r, d, n_e, 1.0)).unwrap();
        let p = MoEParams {
            experts: experts.clone(),
            router_w1: rw1,
            router_w2: rw2,
            k,
        };
        let zc: Array2<f64> = normal_init(&mut r, 1, d, 1.0);
        let zt: Array2<f64> = normal_init(&mut r, 1, d, 1.0);

        let logits = zc.dot(store.get(rw1)) + zt.dot(store.get(rw2));
        let row: Vec<f64> = logits.iter().copied().collect();
        let mut order: Vec<usize> = (0..n_e).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let kept = &order[..k];
        let max = row[kept[0]];
        let z: f64 = kept.iter().map(|&i| (row[i] - max).exp()).sum();
        let mut dense = Array2::<f64>::zeros((1, d));
        for (e, ep) in experts.iter().enumerate() {
            let g = if kept.contains(&e) { (row[e] - max).exp() / z } else { 0.0 };
            let out = dense_expert(&zc, store.get(ep.w1), store.get(ep.b1), store.get(ep.w2), store.get(ep.b2));
            dense = dense + out * g;
        }

        let mut tape = Tape::new(&store);
        let a = tape.constant(zc.clone());
        let b = tape.constant(zt.clone());
        let out = moe_forward(&mut tape, a, b, &p, None).unwrap();
        assert_eq!(out.selected.len(), k);
        worst = worst.max(max_abs_diff(tape.value(out.s), &dense));
    }
    worst
}

/// Scores drawn from a small grid so that ties are common.
pub fn tied_instance<R: Rng>(r: &mut R, n: usize) -> (Vec<f64>, Vec<bool>) {
    let grid = r.random_range(2..=12);
    let scores = (0..n).map(|_| r.random_range(0..grid) as f64 / grid as f64).collect();
    let rate = r.random_range(0.1..0.9);
    let labels = (0..n).map(|_| r.random_bool(rate)).collect();
    (scores, labels)
}

#[derive(Debug)]
pub struct MetricGap {
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_checked: usize,
    /// Instances where defined-ness disagreed with the oracle.
    pub mismatched: usize,
}

/// AUROC / AUPRC against the exhaustive oracles on `trials` random tied
/// instances of size 1..=100.
pub fn metric_oracle_gap(trials: usize, seed: u64) -> MetricGap {
    let mut r = rng(seed);
    let mut g = MetricGap {
        auroc: 0.0,
        auprc: 0.0,
        auroc_checked: 0,
        mismatched: 0,
    };
    for _ in 0..trials {
        let n = r.random_range(1..=100);
        let (s, l) = tied_instance(&mut r, n);
        match (auroc_oracle(&s, &l), auroc(&s, &l)) {
            (Some(want), Ok(got)) => {
                g.auroc = g.auroc.max((got - want).abs());
                g.auroc_checked += 1;
            }
            (None, Err(_)) => {}
            _ => g.mismatched += 1,
        }
        match (auprc_oracle(&s, &l), auprc(&s, &l)) {
            (Some(want), Ok(got)) => g.auprc = g.auprc.max((got - want).abs()),
            (None, Err(_)) => {}
            _ => g.mismatched += 1,
        }
    }
    g
}
