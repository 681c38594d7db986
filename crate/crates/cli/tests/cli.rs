use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segcotrain"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn segcotrain")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small 8³, three-class dataset plus a matching config file.
fn setup() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let o = run(&[
        "gen-data", "--out", s(&data), "--volumes", "4", "--val-volumes", "2", "--labeled-frac", "0.5",
        "--size", "8", "--classes", "3", "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = dir.path().join("c.cfg");
    fs::write(
        &cfg,
        "model.num_classes = 3\nmodel.base_channels = 2\ntrain.iters = 6\nrun.checkpoint_every = 0\n",
    )
    .unwrap();
    (dir, data.join("manifest.tsv"), cfg)
}

fn records(log: &Path, kind: &str) -> Vec<Value> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == kind)
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_splits_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--out", s(out), "--volumes", "12", "--labeled-frac", "0.25", "--seed", "7", "--size", "16"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("manifest.tsv"));
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let count = |tag: &str| manifest.lines().filter(|l| l.starts_with(tag)).count();
    assert_eq!((count("labeled"), count("unlabeled"), count("val")), (3, 9, 4));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gen_data_usage_errors_exit_2() {
    let o = run(&["gen-data", "--volumes", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
    let dir = TempDir::new().unwrap();
    let o = run(&["gen-data", "--out", s(dir.path()), "--size", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(code(&run(&["gen-data", "--out", "x", "--bogus"])), 2);
}

#[test]
fn train_writes_one_record_per_iteration_and_is_deterministic() {
    let (dir, manifest, cfg) = setup();
    let mut logs = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--iters", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(out.join("final.ckpt").is_file());
        assert!(out.join("report.json").is_file());
        let echo = fs::read_to_string(out.join("config.cfg")).unwrap();
        assert!(echo.contains("train.iters = 5"), "flag must beat config file:\n{echo}");
        let loss = records(&out.join("log.jsonl"), "loss");
        assert_eq!(loss.len(), 5);
        logs.push(fs::read(out.join("log.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn disabled_modules_log_zero_consistency_terms() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("sup");
    let o = run(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--no-mcpc", "--no-cfc", "--no-cmd",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loss = records(&out.join("log.jsonl"), "loss");
    assert_eq!(loss.len(), 6);
    for r in loss {
        for k in ["cps", "con", "dis"] {
            assert_eq!(r[k].as_f64(), Some(0.0), "{k} in {r}");
        }
    }
}

#[test]
fn config_precedence_is_flag_then_set_then_file() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("p");
    let o = run(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out),
        "--set", "train.iters=3", "--set", "train.lr=0.02", "--lr", "0.03", "--set", "mask.ratio=0.25",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.cfg")).unwrap();
    for line in ["train.iters = 3", "train.lr = 0.03", "mask.ratio = 0.25", "model.base_channels = 2", "train.momentum = 0.9"] {
        assert!(echo.contains(line), "missing `{line}` in\n{echo}");
    }
}

#[test]
fn train_usage_errors_exit_2() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("x");
    let missing = dir.path().join("nope.tsv");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--manifest", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 2);
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--set", "no.such=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--direction", "sideways"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("boom");
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--lr", "1e30"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn eval_reports_are_finite_and_repeatable() {
    let (dir, manifest, cfg) = setup();
    let fresh = run(&["eval", "--random-init", "--config", s(&cfg), "--manifest", s(&manifest)]);
    assert_eq!(code(&fresh), 0, "{}", stderr(&fresh));
    let text = String::from_utf8_lossy(&fresh.stdout);
    let json: Value = serde_json::from_str(&text[text.find('{').unwrap()..]).unwrap();
    let dice = json["per_class_dice"].as_array().unwrap();
    assert_eq!(dice.len(), 2);
    for d in dice {
        let d = d.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&d) && d.is_finite());
    }

    let out = dir.path().join("t");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)])), 0);
    let ckpt = out.join("final.ckpt");
    let json_path = dir.path().join("r.json");
    let a = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--json", s(&json_path)]);
    let b = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let saved: Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert!(saved["avg_dice"].as_f64().unwrap().is_finite());
    let ens = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--ensemble"]);
    assert_eq!(code(&ens), 0, "{}", stderr(&ens));
}

#[test]
fn eval_checkpoint_problems_exit_4() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("t");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--iters", "1"])), 0);
    let ckpt = out.join("final.ckpt");

    let o = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--num-classes", "4"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("head"), "diff should name the head tensors: {}", stderr(&o));

    let bytes = fs::read(&ckpt).unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&bad), "--manifest", s(&manifest)])), 4);
}

#[test]
fn resume_continues_the_same_trace() {
    let (dir, manifest, cfg) = setup();
    let whole = dir.path().join("whole");
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&whole), "--set", "run.checkpoint_every=3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let part = dir.path().join("part");
    fs::create_dir_all(part.join("checkpoints")).unwrap();
    let mid = whole.join("checkpoints").join("iter_000003.ckpt");
    let o = run(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&part),
        "--set", "run.checkpoint_every=3", "--resume", s(&mid),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(whole.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
    let tail = |p: &Path| records(&p.join("log.jsonl"), "loss").into_iter().filter(|r| r["iter"].as_u64() >= Some(3)).collect::<Vec<_>>();
    assert_eq!(tail(&whole), tail(&part));
}

#[test]
fn ablate_subset_gives_two_rows_and_repeatable_baseline() {
    let (dir, manifest, cfg) = setup();
    let mut baselines = Vec::new();
    for name in ["a1", "a2"] {
        let out = dir.path().join(name);
        let o = run(&["ablate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--subset", "mcpc", "--iters", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
        let rows = rows.as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["label"], "none");
        assert_eq!(rows[1]["label"], "mcpc");
        let table = String::from_utf8_lossy(&o.stdout);
        assert_eq!(table.lines().count(), 3, "{table}");
        baselines.push((rows[0].clone(), fs::read(out.join("none").join("log.jsonl")).unwrap()));
    }
    assert_eq!(baselines[0], baselines[1]);
}

#[test]
fn ablate_records_failures_and_exits_5() {
    let (dir, manifest, cfg) = setup();
    let out = dir.path().join("ab");
    let o = run(&[
        "ablate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out), "--subset", "cfc", "--iters", "2", "--lr", "1e30",
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.matches("FAILED").count(), 2, "{table}");
    assert!(out.join("ablation.txt").is_file());
}
