mod common;

use common::*;
use flexcare::autodiff::Tape;
use flexcare::config::{Ablation, TrainConfig};
use flexcare::data::{PatientBatch, PatientSample};
use flexcare::model::Model;
use flexcare::tasks::HeadKind;
use flexcare::training::{batch_objective, grad_check};

#[test]
fn task_token_does_not_reach_shared_outputs() {
    let (shared, task) = task_agnosticism(30, 1);
    assert!(shared < 1e-6, "shared outputs moved by {shared}");
    assert!(task > 1e-3, "task output moved only {task}");
}

#[test]
fn perturbing_a_modality_only_moves_its_combinations() {
    let (outside, inside) = combination_isolation(14, 2);
    assert!(outside < 1e-6, "unrelated combination moved by {outside}");
    assert!(inside > 1e-6, "related combination moved only {inside}");
}

#[test]
fn gradients_match_central_differences() {
    for (task, report) in gradient_suite(3) {
        for e in &report.entries {
            assert!(e.max_rel_err < 1e-4, "task {task} tensor {} rel err {}", e.name, e.max_rel_err);
        }
    }
}

#[test]
fn ablated_models_pass_gradient_checks() {
    let train = TrainConfig {
        beta: 0.5,
        ..TrainConfig::default()
    };
    for a in Ablation::ALL {
        let cfg = small_config(8, 1, 3, 2).with_ablation(Some(a));
        let model = Model::<f64>::new(cfg.clone(), three_tasks(), 4).unwrap();
        let mut r = rng(4);
        let inputs: Vec<_> = (0..3).map(|k| random_inputs::<f64, _>(&mut r, &cfg, PATTERNS[6 - k])).collect();
        let labels: Vec<_> = inputs.iter().map(|_| random_label(&mut r, HeadKind::Binary, 1)).collect();
        if model.moe.is_some() && router_margin(&model, &inputs, 0) < 1e-3 {
            continue;
        }
        let report = grad_check(&model, &inputs, &labels, 0, &train, GRAD_STEP, GRAD_FLOOR).unwrap();
        assert!(report.worst() < 1e-4, "{}: {:?}", a.code(), report.entries.iter().filter(|e| e.max_rel_err > 1e-5).collect::<Vec<_>>());
    }
}

#[test]
fn batch_padding_is_invisible() {
    let cfg = small_config(8, 1, 3, 2);
    let model = Model::<f32>::new(cfg.clone(), three_tasks(), 5).unwrap();
    let mut r = rng(5);
    let samples: Vec<PatientSample> = (0..6)
        .map(|k| PatientSample {
            id: format!("s{k}"),
            task_id: 0,
            label: random_label(&mut r, HeadKind::Binary, 1),
            inputs: random_inputs::<f32, _>(&mut r, &cfg, PATTERNS[k % 7]),
        })
        .collect();
    let refs: Vec<&PatientSample> = samples.iter().collect();
    let batch = PatientBatch::from_samples(&refs, &model.input_dims()).unwrap();
    for (k, s) in samples.iter().enumerate() {
        assert_eq!(batch.inputs(k), s.inputs);
        let alone = model.predict(&s.inputs, 0).unwrap();
        assert_eq!(model.predict(&batch.inputs(k), 0).unwrap(), alone);
    }
    // a sample's loss contribution does not depend on its batch mates
    let cfg_t = TrainConfig {
        balance_weight: 0.0,
        ..TrainConfig::default()
    };
    let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
    let inputs: Vec<_> = samples.iter().map(|s| s.inputs.clone()).collect();
    let whole = batch_objective(&model, &inputs, &labels, 0, &cfg_t, 1.0).unwrap().pred;
    let parts: f64 = (0..6)
        .map(|k| batch_objective(&model, &inputs[k..=k], &labels[k..=k], 0, &cfg_t, 1.0).unwrap().pred)
        .sum::<f64>()
        / 6.0;
    assert!((whole - parts).abs() < 1e-6);
}

#[test]
fn adding_a_task_leaves_existing_outputs_alone() {
    let cfg = small_config(8, 1, 3, 2);
    let mut model = Model::<f32>::new(cfg.clone(), three_tasks(), 6).unwrap();
    let mut r = rng(6);
    let inputs: Vec<_> = (0..10).map(|k| random_inputs::<f32, _>(&mut r, &cfg, PATTERNS[k % 7])).collect();
    let before: Vec<Vec<Vec<f32>>> = (0..3)
        .map(|t| inputs.iter().map(|x| model.predict(x, t).unwrap()).collect())
        .collect();
    let id = model.add_task("new", HeadKind::Multiclass, 5, 1.0).unwrap();
    assert_eq!(id, 3);
    for (t, want) in before.iter().enumerate() {
        let got: Vec<Vec<f32>> = inputs.iter().map(|x| model.predict(x, t).unwrap()).collect();
        assert_eq!(&got, want);
    }
    assert_eq!(model.predict(&inputs[0], 3).unwrap().len(), 5);
    assert!(model.add_task("new", HeadKind::Binary, 1, 1.0).is_err());
}

#[test]
fn fusion_weights_sum_to_one_per_sample() {
    let cfg = small_config(8, 1, 3, 2);
    let model = Model::<f64>::new(cfg.clone(), three_tasks(), 7).unwrap();
    let mut r = rng(7);
    for k in 0..21 {
        let x = random_inputs::<f64, _>(&mut r, &cfg, PATTERNS[k % 7]);
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &x, k % 3, None).unwrap();
        let a = tape.value(out.alphas);
        assert_eq!(a.len(), out.combinations.len());
        assert!((a.sum() - 1.0).abs() < 1e-6);
        assert_eq!(tape.value(out.s_p).len(), 16);
        for (g, sel) in &out.gates {
            assert_eq!(sel.len(), 2);
            assert!((tape.value(*g).sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn ablation_a_uses_no_combination_tokens_or_experts() {
    let cfg = small_config(8, 1, 3, 2).with_ablation(Some(Ablation::A));
    let model = Model::<f64>::new(cfg.clone(), three_tasks(), 8).unwrap();
    let mut r = rng(8);
    let x = random_inputs::<f64, _>(&mut r, &cfg, 0b111);
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &x, 0, None).unwrap();
    assert!(out.z_comb.is_none() && out.cov.is_none() && out.gates.is_empty());
    assert_eq!(out.combinations.len(), 7);
    assert!(model.moe.is_none());
}
