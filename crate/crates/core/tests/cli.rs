mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmlformer")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.conf")
}

#[test]
fn unknown_objective_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::data_path("sample_corpus.jsonl");
    let out = cli(&[
        "pretrain",
        "--config",
        s(&tiny_config()),
        "--data",
        s(&corpus),
        "--objectives",
        "mlm,nsp",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown objective `nsp`"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(code(&cli(&["pretrain"])), 1);
    assert_eq!(code(&cli(&["evaluate", "--model", "/nonexistent.ckpt", "--data", "x.jsonl"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "layers = two\n").unwrap();
    let corpus = common::data_path("sample_corpus.jsonl");
    let out = cli(&["pretrain", "--config", s(&conf), "--data", s(&corpus), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let corpus = common::data_path("sample_corpus.jsonl");
    let out = cli(&[
        "pretrain",
        "--config",
        s(&tiny_config()),
        "--data",
        s(&corpus),
        "--set",
        "epochs=1",
        "--out",
        s(&blocker.join("run")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mock_augmentation_runs_offline() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    fs::write(&input, "{\"hinglish\": \"Phone ko charge karo\", \"labels\": [1, 0, 1, 0]}\n").unwrap();
    let output = dir.path().join("aug.jsonl");
    let out = cli(&["augment", "--in", s(&input), "--out", s(&output), "--mock"]);
    assert_eq!(code(&out), 0);
    let line = fs::read_to_string(&output).unwrap();
    assert!(line.contains("\"english\":\"Phone ko charge karo\""), "{line}");
    assert!(dir.path().join("aug.jsonl.manifest.json").exists());
}

#[test]
fn annotate_derives_switching_points_and_cmi() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    fs::write(&input, "{\"hinglish\": \"Phone ko charge karo\", \"labels\": [1, 0, 1, 0]}\n").unwrap();
    let output = dir.path().join("ann.jsonl");
    let out = cli(&["annotate", "--in", s(&input), "--out", s(&output), "--wn", "1", "--wp", "1"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(fs::read_to_string(&output).unwrap().trim()).unwrap();
    assert_eq!(v["switching_points"], serde_json::json!([0, 1, 1, 1]));
    assert_eq!(v["cmi"], serde_json::json!(1.25));
}

#[test]
fn pretrain_finetune_evaluate_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::data_path("sample_corpus.jsonl");
    let labeled = common::data_path("sample_classification.jsonl");
    let pt = dir.path().join("pt");
    let config = tiny_config();
    let args = [
        "pretrain",
        "--config",
        s(&config),
        "--data",
        s(&corpus),
        "--coupling",
        "async",
        "--seed",
        "3",
        "--out",
        s(&pt),
    ];
    assert_eq!(code(&cli(&args)), 0);
    let first: Vec<Vec<u8>> =
        ["loss.csv", "model.ckpt", "manifest.json", "vocab.txt"].iter().map(|f| fs::read(pt.join(f)).unwrap()).collect();
    assert_eq!(code(&cli(&args)), 0);
    for (i, f) in ["loss.csv", "model.ckpt", "manifest.json", "vocab.txt"].iter().enumerate() {
        assert_eq!(fs::read(pt.join(f)).unwrap(), first[i], "{f} differs between identical runs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["coupling"], "async");

    let ft = dir.path().join("ft");
    let out = cli(&[
        "finetune",
        "--encoder",
        s(&pt.join("model.ckpt")),
        "--data",
        s(&labeled),
        "--set",
        "batch_size=4",
        "--set",
        "epochs=3",
        "--out",
        s(&ft),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = dir.path().join("metrics.json");
    let out = cli(&["evaluate", "--model", s(&ft.join("classifier.ckpt")), "--data", s(&labeled), "--out", s(&metrics)]);
    assert_eq!(code(&out), 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    let total = ["tp", "fp", "fn", "tn"].iter().map(|k| m[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(total, 12);

    let att = dir.path().join("att.json");
    let out = cli(&[
        "attention",
        "--model",
        s(&pt.join("model.ckpt")),
        "--text",
        "Phone ko charge karo",
        "--labels",
        "1,0,1,0",
        "--out",
        s(&att),
    ]);
    assert_eq!(code(&out), 0);
    let out = cli(&["attention", "--model", s(&pt.join("model.ckpt")), "--text", "Phone ko", "--labels", "1,0,1", "--out", s(&att)]);
    assert_eq!(code(&out), 1);
    assert!(start.elapsed().as_secs() < 300);
}
