use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use boundaryface::io;

const BIN: &str = env!("CARGO_BIN_EXE_boundaryface");

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "dataset": {
            "num_classes": 4,
            "samples_per_class": 20,
            "input_dim": 8,
            "concentration": 6.0,
            "num_distractor_classes": 2,
            "num_holdout_classes": 4,
            "seed": 3
        },
        "noise": {"closed_ratio": 0.2, "open_ratio": 0.1, "seed": 5},
        "model": {"embed_dim": 6, "hidden_dim": 12},
        "train": {"epochs": 4, "batch_size": 16},
        "heads": [{"kind": "arcface"}, {"kind": "boundaryface"}],
        "seeds": [1, 2],
        "eval": {"num_pairs": 40, "pair_seed": 9},
        "sweep": {"closed": [0.0, 0.2], "open": [0.0]},
        "gradcheck": {"seeds": [0, 1]},
        "output_dir": dir.join("out")
    });
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("BOUNDARYFACE_OUTPUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("out");

    let stdout = ok(&["gen", "--config", c]);
    assert!(stdout.contains("train       80 samples (16 closed-set, 8 open-set)"), "{stdout}");
    assert!(stdout.contains("disjoint    true"));
    let ledger = io::read_ledger(&out.join("data/ledger.csv")).unwrap();
    assert_eq!(ledger.len(), 24);

    ok(&["train", "--config", c, "--jobs", "2"]);
    assert_eq!(
        sorted_names(&out.join("runs")),
        [
            "arcface_1.ckpt",
            "arcface_1.csv",
            "arcface_2.ckpt",
            "arcface_2.csv",
            "boundaryface_1.ckpt",
            "boundaryface_1.csv",
            "boundaryface_2.ckpt",
            "boundaryface_2.csv"
        ]
    );

    let stdout = ok(&["eval", "--config", c]);
    assert!(stdout.contains("arcface") && stdout.contains("boundaryface"), "{stdout}");
    let rows = io::read_comparison(&out.join("eval/comparison.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| (0.5..=1.0).contains(&r.accuracy)));
    // Only the correcting head gets detection curves.
    assert_eq!(sorted_names(&out.join("eval/curves")), ["boundaryface_1.csv", "boundaryface_2.csv"]);
    let summary = fs::read_to_string(out.join("eval/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let read_all = |root: &Path| -> Vec<Vec<u8>> {
        sorted_names(&root.join("runs"))
            .iter()
            .map(|n| fs::read(root.join("runs").join(n)).unwrap())
            .collect()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, jobs) in [(&a, "1"), (&b, "4")] {
        let set = format!("output_dir={}", serde_json::to_string(dir).unwrap());
        ok(&["gen", "--config", c, "--set", &set]);
        ok(&["train", "--config", c, "--set", &set, "--jobs", jobs]);
    }
    assert_eq!(read_all(&a), read_all(&b));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = Command::new(BIN)
        .args(["gen", "--config", cfg.to_str().unwrap(), "--set", "output_dir=rel"])
        .env("BOUNDARYFACE_OUTPUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("root/rel/data/train.txt").exists());
}

#[test]
fn gradcheck_passes_and_fault_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let stdout = ok(&["gradcheck", "--config", c]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{stdout}");

    let out = run(&["gradcheck", "--config", c, "--set", "gradcheck.fault_scale=1.001"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("FAIL")).count(), 8, "{stdout}");
}

#[test]
fn sweep_covers_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&["sweep", "--config", c, "--set", "seeds=[1]", "--set", "train.epochs=2"]);
    let sweep = tmp.path().join("out/sweep");
    assert_eq!(sorted_names(&sweep), ["closed0.2_open0", "closed0_open0", "summary.csv"]);
    let summary = fs::read_to_string(sweep.join("summary.csv")).unwrap();
    // Header plus two heads for each of two cells.
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn invalid_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let out = run(&["gen", "--config", c, "--set", "noise.open_ratio=0.9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("below 1"));

    let out = run(&["train", "--config", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `gen` first"));

    let out = run(&["eval", "--config", &tmp.path().join("missing.json").display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
}
