use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexcare::cli::{read_run_manifest, RUN_MANIFEST_FILE};

const TINY: &str = r#"
[gen]
n_samples = 40
ts_features = 5
image_size = 4
note_features = 3

[model]
d_model = 8
layers = 1
experts = 3
patch_size = 2

[train]
epochs = 2
"#;

fn flexcare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcare"))
        .args(args)
        .env_remove("FLEXCARE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flexcare(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    flexcare(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Workspace { _dir: dir, root, config }
}

#[test]
fn full_pipeline() {
    let w = workspace();
    let data = w.root.join("data");
    let gen = ok(&["gen", "--config", s(&w.config), "--out", s(&data), "--seed", "3", "--with-extension"]);
    assert!(gen.contains("drg"));
    assert!(data.join("dataset.json").exists() && data.join(RUN_MANIFEST_FILE).exists());

    let run = w.root.join("run");
    let table = ok(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&run)]);
    assert!(table.contains("auroc") && table.contains("micro_f1") && table.contains("macro_auroc"));
    let manifest = read_run_manifest(&run).unwrap();
    assert_eq!(manifest.command, "train");
    assert!(manifest.inputs.iter().any(|d| d.path.ends_with("dataset.json")));
    assert!(manifest.outputs.iter().any(|d| d.path == "checkpoint/manifest.json"));
    assert!(run.join("metrics.jsonl").exists() && run.join("test_metrics.csv").exists());

    let ckpt = run.join("checkpoint");
    let all = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    for t in ["ihm", "los", "dec", "phe", "rea", "dia", "drg"] {
        assert!(all.contains(t), "{t} missing from\n{all}");
    }
    let one = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "ihm"]);
    assert!(one.contains("auprc") && !one.contains("los"));
    let los = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "los"]);
    assert!(los.contains("macro_f1") && los.contains("micro_f1"));

    for kind in ["experts", "embeddings", "alphas"] {
        let out = w.root.join(format!("an-{kind}"));
        ok(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--kind", kind, "--out", s(&out)]);
        let text = fs::read_to_string(out.join(format!("{kind}.csv"))).unwrap();
        assert!(text.lines().count() > 1, "{kind} is empty");
    }
    let emb = fs::read_to_string(w.root.join("an-embeddings/embeddings.csv")).unwrap();
    let width = emb.lines().nth(1).unwrap().split(',').count();
    assert_eq!(width, 2 + 16);

    // the model was trained on all seven tasks; add-task needs a fresh name
    assert_eq!(
        code(&["add-task", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "drg", "--out", s(&w.root.join("dup"))]),
        3
    );
}

#[test]
fn add_task_pretrained_and_from_scratch() {
    let w = workspace();
    let base = w.root.join("base");
    ok(&["gen", "--config", s(&w.config), "--out", s(&base), "--seed", "4"]);
    let ext = w.root.join("ext");
    ok(&["gen", "--config", s(&w.config), "--out", s(&ext), "--seed", "4", "--with-extension"]);
    let run = w.root.join("run");
    ok(&["train", "--config", s(&w.config), "--data", s(&base), "--out", s(&run)]);
    let ckpt = run.join("checkpoint");
    for (flag, dir) in [(None, "pre"), (Some("--from-scratch"), "scratch")] {
        let out = w.root.join(dir);
        let mut args = vec![
            "add-task", "--config", s(&w.config), "--checkpoint", s(&ckpt), "--data", s(&ext), "--task", "drg",
            "--fraction", "0.5", "--out", s(&out),
        ];
        args.extend(flag);
        let text = ok(&args);
        assert!(text.contains("epoch   1 train_loss"));
        let (model, _) = flexcare::checkpoint::load(&out.join("checkpoint")).unwrap();
        let want = if flag.is_some() { 1 } else { 7 };
        assert_eq!(model.registry.len(), want);
    }
}

#[test]
fn single_task_and_ablation_flags() {
    let w = workspace();
    let data = w.root.join("data");
    ok(&["gen", "--config", s(&w.config), "--out", s(&data)]);
    let st = w.root.join("st");
    ok(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&st), "--single-task", "ihm,dec", "--epochs", "1"]);
    assert!(st.join("ihm/checkpoint/manifest.json").exists() && st.join("dec/checkpoint/manifest.json").exists());
    let (m, _) = flexcare::checkpoint::load(&st.join("ihm/checkpoint")).unwrap();
    assert_eq!(m.registry.len(), 1);

    let ab = w.root.join("ab");
    ok(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&ab), "--ablate", "c-", "--epochs", "1"]);
    let (m, _) = flexcare::checkpoint::load(&ab.join("checkpoint")).unwrap();
    assert!(m.config.combination_tokens && m.config.decorrelation && !m.config.moe);
    assert_eq!(
        code(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&ab), "--ablate", "e-"]),
        3
    );
}

#[test]
fn gen_digests_are_reproducible() {
    let w = workspace();
    let a = w.root.join("a");
    let b = w.root.join("b");
    ok(&["gen", "--config", s(&w.config), "--out", s(&a), "--seed", "5"]);
    ok(&["gen", "--config", s(&w.config), "--out", s(&b), "--seed", "5"]);
    let (ma, mb) = (read_run_manifest(&a).unwrap(), read_run_manifest(&b).unwrap());
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.outputs.len(), 1 + 6 * 3);
}

#[test]
fn exit_codes_by_failure_class() {
    let w = workspace();
    let bad = w.root.join("bad.toml");
    fs::write(&bad, format!("{TINY}\n[[gen.tasks]]\nname = \"x\"\nhead_kind = \"binary\"\nlabel_dim = 1\nloss_weight = 1.0\nfactor = \"f\"\nmissing = {{ t = 1.5, i = 0.0, n = 0.0 }}\n")).unwrap();
    let out = flexcare(&["gen", "--config", s(&bad), "--out", s(&w.root.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen.tasks[0].missing.t"));

    assert_eq!(code(&["train", "--out", s(&w.root.join("y"))]), 2);
    assert_eq!(code(&["gen", "--config", s(&w.config)]), 3);

    let data = w.root.join("data");
    ok(&["gen", "--config", s(&w.config), "--out", s(&data)]);
    // silent drift after generation is caught by the manifest
    let f = data.join("ihm/test.jsonl");
    let mut text = fs::read_to_string(&f).unwrap();
    text.push('\n');
    fs::write(&f, text).unwrap();
    assert_eq!(code(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&w.root.join("z"))]), 4);
    fs::remove_file(data.join(RUN_MANIFEST_FILE)).unwrap();
    fs::write(&f, "{not json}\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&w.config), "--data", s(&data), "--out", s(&w.root.join("z"))]), 4);

    let good = w.root.join("good");
    ok(&["gen", "--config", s(&w.config), "--out", s(&good)]);
    let run = w.root.join("run");
    ok(&["train", "--config", s(&w.config), "--data", s(&good), "--out", s(&run), "--epochs", "1"]);
    let manifest = run.join("checkpoint/manifest.json");
    let v = fs::read_to_string(&manifest).unwrap().replacen("\"version\": 1", "\"version\": 2", 1);
    fs::write(&manifest, v).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&good)]), 6);
}

#[test]
fn output_root_from_environment() {
    let w = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_flexcare"))
        .args(["gen", "--config", s(&w.config)])
        .env("FLEXCARE_OUT", &w.root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(w.root.join("gen/dataset.json").exists());
}
