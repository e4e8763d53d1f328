use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spec_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/conditions.toml")
}

fn dermsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dermsynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, real_root: &Path) -> PathBuf {
    let text = format!(
        r#"
spec_file = "{spec}"
n_runs = 2
output_dir = "{out}"
timestamped = false
deterministic = true
cam_samples_per_class = 1

[backend]
kind = "mock"
strength = 1.0

[synthetic]
per_class = 12
width = 32
height = 32

[real]
root = "{real}"

[split]
finetune_fraction = 0.25

[preprocess]
target_size = [16, 16]

[train]
architecture = "small_cnn"
epochs = 2
learning_rate = 0.002
batch_size = 8

[finetune]
per_class_count = 2
epochs = 5
learning_rate = 0.01
"#,
        spec = s(&spec_file()),
        out = s(&dir.join("runs")),
        real = s(real_root),
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Mock images laid out as a class-per-folder tree.
fn fake_real(dir: &Path) -> PathBuf {
    let root = dir.join("real");
    let out = dermsynth(&[
        "generate",
        "--spec",
        s(&spec_file()),
        "--per-class",
        "8",
        "--size",
        "32",
        "--seed",
        "999",
        "--out",
        s(&root),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::remove_file(root.join("manifest.jsonl")).unwrap();
    root
}

#[test]
fn compile_prompts_prints_json_lines() {
    let out = dermsynth(&["compile-prompts", "--spec", s(&spec_file()), "--per-condition", "6", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 24);
    assert!(lines.iter().all(|l| l["rendered"].as_str().unwrap().contains("skin")));
    let again = dermsynth(&["compile-prompts", "--spec", s(&spec_file()), "--per-condition", "6", "--seed", "3"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn validation_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dermsynth(&["run", "--config", s(&dir.path().join("missing.toml"))])), 1);
    assert_eq!(code(&dermsynth(&["no-such-command"])), 1);
    assert_eq!(code(&dermsynth(&["generate", "--spec", s(&spec_file())])), 1);

    // config points at a real root that does not exist; nothing is written
    let config = tiny_config(dir.path(), &dir.path().join("absent"));
    let out = dermsynth(&["run", "--config", s(&config)]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn stage_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let real = fake_real(dir.path());
    let manifest = dir.path().join("real.jsonl");
    assert_eq!(code(&dermsynth(&["ingest", "--root", s(&real), "--out", s(&manifest)])), 0);
    let model = dir.path().join("model.json");
    let out = dermsynth(&[
        "train", "--manifest", s(&manifest), "--arch", "small_cnn", "--epochs", "1", "--out", s(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::remove_dir_all(real.join("warts")).unwrap();
    let out = dermsynth(&["evaluate", "--model", s(&model), "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluate"));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let real = fake_real(d);
    let synthetic = d.join("synthetic");
    let out = dermsynth(&[
        "generate", "--spec", s(&spec_file()), "--per-class", "8", "--size", "32", "--out", s(&synthetic),
    ]);
    assert_eq!(code(&out), 0);
    let real_manifest = d.join("real.jsonl");
    assert_eq!(code(&dermsynth(&["ingest", "--root", s(&real), "--out", s(&real_manifest)])), 0);
    let split = d.join("split");
    let out = dermsynth(&["split", "--manifest", s(&real_manifest), "--fraction", "0.25", "--out", s(&split)]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "finetune 8 / eval 24");

    let model = d.join("model.json");
    let out = dermsynth(&[
        "train",
        "--manifest",
        s(&synthetic.join("manifest.jsonl")),
        "--arch",
        "small_cnn",
        "--epochs",
        "2",
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.is_file() && d.join("model.history.json").is_file());

    let tuned = d.join("tuned.json");
    let out = dermsynth(&[
        "finetune",
        "--model",
        s(&model),
        "--manifest",
        s(&split.join("finetune.jsonl")),
        "--per-class",
        "2",
        "--out",
        s(&tuned),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report = d.join("report.json");
    let out = dermsynth(&[
        "evaluate",
        "--model",
        s(&tuned),
        "--manifest",
        s(&split.join("eval.jsonl")),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Accuracy (%)"));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["n_samples"], 24);

    let image = real.join("scabies/scabies_00000.png");
    let overlay = d.join("cam.png");
    let out = dermsynth(&[
        "cam", "--model", s(&tuned), "--image", s(&image), "--class", "scabies", "--out", s(&overlay),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(overlay.is_file());
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let real = fake_real(dir.path());
    let config = tiny_config(dir.path(), &real);
    let out = dermsynth(&["run", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Pretrained + LTI + Finetune"), "{stdout}");

    let runs = dir.path().join("runs");
    for f in ["config.toml", "comparison.json", "comparison.txt", "real_split/eval.jsonl"] {
        assert!(runs.join(f).is_file(), "{f} missing");
    }
    let p3 = runs.join("runs/run_001/P3_pretrained_lti_finetune");
    assert!(p3.join("run.json").is_file() && p3.join("model.json").is_file());
    assert_eq!(fs::read_dir(p3.join("cams")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(runs.join("panels")).unwrap().count(), 4);

    let before = fs::read_to_string(runs.join("comparison.txt")).unwrap();
    fs::remove_file(runs.join("comparison.txt")).unwrap();
    let out = dermsynth(&["report", "--dir", s(&runs)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(runs.join("comparison.txt")).unwrap(), before);
}
