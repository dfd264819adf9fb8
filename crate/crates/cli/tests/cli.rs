use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use residual_lora::container::{container_paths, load_library, save_library};
use residual_lora::{ExpertAdapter, Provenance};

const TINY: &str = r#"
version = 1
[suite]
examples_per_task = 24
general_examples = 24
items_per_task = 6
heldout_tasks = 3
[expert_train]
epochs = 1
batch_size = 4
[general_train]
epochs = 1
batch_size = 4
"#;

fn rlora(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlora"))
        .args(args)
        .current_dir(root)
        .env("RLORA_OUT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// One trained run shared by every test in this binary.
fn trained() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = scratch();
        ok(&rlora(dir.path(), &["train-experts", "--config", "tiny.toml", "--out", "run"]));
        dir
    })
    .path()
}

fn scratch() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn train_writes_the_run_layout() {
    let root = trained();
    let run = root.join("run");
    for f in ["library.manifest.json", "library.blob", "model.manifest.json", "model.blob", "config.toml", "run.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let logs = std::fs::read_dir(run.join("logs")).unwrap().count();
    assert_eq!(logs, 12);
    let lib = load_library::<f32>(&run.join("library")).unwrap();
    assert_eq!(lib.n_experts(), 10);
    assert_eq!(lib.generals.keys().collect::<Vec<_>>(), ["gen", "shared"]);
    let stamp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(stamp["experts"], 10);
}

#[test]
fn check_reproduces_the_library() {
    let out = ok(&rlora(trained(), &["train-experts", "--config", "tiny.toml", "--out", "run", "--check"]));
    assert!(out.contains("check ok"), "{out}");
}

#[test]
fn check_without_a_run_fails() {
    let dir = scratch();
    let root = dir.path();
    let out = rlora(root, &["train-experts", "--config", "tiny.toml", "--out", "none", "--check"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nothing to check"));
}

#[test]
fn existing_run_needs_force() {
    let out = rlora(trained(), &["train-experts", "--config", "tiny.toml", "--out", "run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = scratch();
    let root = dir.path();
    std::fs::write(root.join("bad.toml"), "version = 1\n[suite]\ngama = 0.5\n").unwrap();
    let out = rlora(root, &["train-experts", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("gama") && err.contains("line 3"), "{err}");
    assert!(!root.join("run").exists());

    std::fs::write(root.join("range.toml"), "version = 1\n[suite]\ngamma = 1.5\n").unwrap();
    let out = rlora(root, &["train-experts", "--config", "range.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("gamma"), "{}", stderr(&out));
}

#[test]
fn subtract_records_provenance() {
    let root = trained();
    let out = ok(&rlora(root, &["subtract", "--library", "run/library", "--general", "gen", "--out", "sub/residual"]));
    assert!(out.contains("residual(gen, delta)"), "{out}");
    let res = load_library::<f32>(&root.join("sub/residual")).unwrap();
    assert!(matches!(res.provenance, Provenance::Residual { .. }));
    assert_eq!(res.n_experts(), 10);
}

#[test]
fn unknown_general_lists_the_available_names() {
    let out = rlora(trained(), &["subtract", "--library", "run/library", "--general", "nope", "--out", "x"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("nope") && err.contains("gen") && err.contains("shared"), "{err}");
}

#[test]
fn param_mode_rejects_a_rank_mismatch() {
    let root = trained();
    let mut lib = load_library::<f32>(&root.join("run/library")).unwrap();
    let sig = lib.signature.clone();
    lib.generals.insert("narrow".into(), ExpertAdapter::zeros("narrow", &sig, 2));
    save_library(&lib, &root.join("narrow/library")).unwrap();
    let out = rlora(root, &["subtract", "--library", "narrow/library", "--general", "narrow", "--mode", "param", "--out", "narrow/res"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rank"), "{}", stderr(&out));
    let out = rlora(root, &["subtract", "--library", "run/library", "--general", "gen", "--mode", "sideways", "--out", "x"]);
    assert!(!out.status.success());
}

#[test]
fn prototypes_write_a_bank() {
    let root = trained();
    let out = ok(&rlora(root, &["prototypes", "--library", "run/library", "--out", "bank/raw"]));
    assert!(out.contains("10 experts"), "{out}");
    let (manifest, blob) = container_paths(&root.join("bank/raw"));
    assert!(manifest.exists() && blob.exists());
}

#[test]
fn single_expert_routes_with_full_weight() {
    let root = trained();
    let mut lib = load_library::<f32>(&root.join("run/library")).unwrap();
    lib.experts.truncate(1);
    save_library(&lib, &root.join("one/library")).unwrap();
    ok(&rlora(root, &["prototypes", "--library", "one/library", "--out", "one/bank"]));
    let args = [
        "route-inspect", "--library", "one/library", "--bank", "one/bank", "--model", "run/model", "--input", "0 2 1", "--k", "3",
    ];
    let out = rlora(root, &args);
    let table = ok(&out);
    assert!(stderr(&out).contains("warning: k = 3"), "{}", stderr(&out));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2 * 2);
    assert!(rows.iter().all(|r| r.ends_with("1.0000")), "{table}");
}

#[test]
fn route_table_is_stable() {
    let root = trained();
    ok(&rlora(root, &["prototypes", "--library", "run/library", "--out", "stable/bank"]));
    let args = [
        "route-inspect", "--library", "run/library", "--bank", "stable/bank", "--model", "run/model", "--input", "0,12,3,1,15", "--k", "2",
    ];
    let a = rlora(root, &args);
    let b = rlora(root, &args);
    assert_eq!(a.stdout, b.stdout);
    let table = ok(&a);
    assert!(stderr(&a).is_empty());
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 5 * 2 * 2 * 2);
    for pair in rows.chunks(2) {
        let c: Vec<f64> = pair.iter().map(|r| r[4].parse().unwrap()).collect();
        assert!(c[0] >= c[1]);
        assert!((c[0] + c[1] - 1.0).abs() < 2e-4);
    }
}

#[test]
fn bank_from_another_library_is_rejected() {
    let root = trained();
    ok(&rlora(root, &["prototypes", "--library", "run/library", "--out", "mismatch/bank"]));
    ok(&rlora(root, &["subtract", "--library", "run/library", "--general", "gen", "--out", "mismatch/res"]));
    let out = rlora(
        root,
        &["route-inspect", "--library", "mismatch/res", "--bank", "mismatch/bank", "--model", "run/model", "--input", "0 1"],
    );
    assert!(!out.status.success());
}

#[test]
fn eval_reports_the_requested_methods() {
    let dir = scratch();
    let root = dir.path();
    let out = ok(&rlora(root, &["eval", "--config", "tiny.toml", "--methods", "arrow,genknowsub", "--out", "e"]));
    assert!(out.contains("Arrow") && out.contains("GenKnowSub"), "{out}");
    assert!(!out.contains("Mean-Norm"), "{out}");
    let report = std::fs::read_to_string(root.join("e/report_seed0.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 3);

    let out = rlora(root, &["eval", "--config", "tiny.toml", "--methods", "lora"]);
    assert!(!out.status.success());
}

#[test]
fn sweep_writes_one_row_per_method_gamma_and_seed() {
    let dir = scratch();
    let root = dir.path();
    ok(&rlora(root, &["eval", "--config", "tiny.toml", "--sweep-gamma", "0,0.5", "--seeds", "0,1", "--out", "s"]));
    let csv = std::fs::read_to_string(root.join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2 * 2);
}
