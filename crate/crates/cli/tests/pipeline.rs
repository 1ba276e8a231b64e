use std::path::Path;
use std::process::{Command, Output};

use dspert_cli::commands::PredictionRecord;
use serde_json::Value;

fn dspert(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dspert"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dspert(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &str = "seed = 5\n[train]\nnumber_of_epochs = 2\n";

#[test]
fn train_eval_predict_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), QUICK).unwrap();
    ok(&["gen-synth", "--out", "data"], d);
    for split in ["train", "dev", "test"] {
        assert!(d.join(format!("data/{split}.jsonl")).exists());
    }
    ok(
        &[
            "train", "--config", "run.toml", "--out", "run", "--data", "data",
        ],
        d,
    );
    for f in [
        "history.jsonl",
        "metrics.json",
        "best.ckpt",
        "config.toml",
        "dev_f1_by_length.csv",
        "dev_f1_by_nestedness.csv",
        "test_f1_by_length.csv",
        "test_f1_by_nestedness.csv",
    ] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let m = json(&d.join("run/metrics.json"));
    assert_eq!(m["seed"], 5);
    assert!(m["dev"]["micro"]["f1"].is_number());

    ok(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/test.jsonl",
            "--out",
            "ev",
        ],
        d,
    );
    let ev = json(&d.join("ev/metrics.json"));
    assert_eq!(ev["micro"], m["test"]["micro"]);
    let stdout = ok(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/test.jsonl",
        ],
        d,
    )
    .stdout;
    let printed: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(printed, ev);

    let out = ok(
        &[
            "predict",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/dev.jsonl",
        ],
        d,
    )
    .stdout;
    let records: Vec<PredictionRecord> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 20);
    for r in &records {
        for e in &r.entities {
            assert!(e.start < e.end && e.end <= r.tokens.len());
            assert!(e.score > 0.0 && e.score <= 1.0);
        }
    }

    ok(
        &[
            "analyze",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/dev.jsonl",
            "--out",
            "an",
        ],
        d,
    );
    let report = json(&d.join("an/prelogit_report.json"));
    assert_eq!(report["template_norms"].as_array().unwrap().len(), 4);
    let pca = std::fs::read_to_string(d.join("an/pca.csv")).unwrap();
    assert!(pca.starts_with("sentence,start,end,label,pc1,pc2"));
    assert!(d.join("an/prelogits.csv").exists() && d.join("an/pca.json").exists());
}

#[test]
fn same_seed_same_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), QUICK).unwrap();
    ok(&["train", "--config", "run.toml", "--out", "a"], d);
    ok(&["train", "--config", "run.toml", "--out", "b"], d);
    for f in [
        "metrics.json",
        "history.jsonl",
        "best.ckpt",
        "dev_f1_by_length.csv",
    ] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    ok(
        &["train", "--config", "run.toml", "--out", "c", "--seed", "6"],
        d,
    );
    let a = std::fs::read(d.join("a/history.jsonl")).unwrap();
    let c = std::fs::read(d.join("c/history.jsonl")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bio_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // BIO cannot carry nesting, so generate a flat corpus.
    std::fs::write(
        d.join("flat.toml"),
        format!("{QUICK}[data.synthetic]\nnest_rate = 0.0\n"),
    )
    .unwrap();
    ok(
        &[
            "gen-synth",
            "--out",
            "data",
            "--config",
            "flat.toml",
            "--format",
            "bio",
        ],
        d,
    );
    ok(
        &[
            "train",
            "--config",
            "flat.toml",
            "--out",
            "run",
            "--data",
            "data",
        ],
        d,
    );
    ok(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/dev.bio",
        ],
        d,
    );
}

#[test]
fn ablation_grid_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "[train]\nnumber_of_epochs = 1\n[data.synthetic]\ntrain_sentences = 12\ndev_sentences = 6\ntest_sentences = 0\n",
    )
    .unwrap();
    let run = |out: &str, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dspert"))
            .args([
                "ablate", "depth", "--config", "run.toml", "--out", out, "--seeds", "1,2",
                "--depths", "0,2",
            ])
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .env("DSPERT_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.join(out).join("ablation.json")).unwrap()
    };
    let serial = run("serial", "1");
    assert_eq!(serial, run("parallel", "3"));
    let report: Value = serde_json::from_slice(&serial).unwrap();
    let cells = report["cells"].as_array().unwrap();
    let names: Vec<_> = cells.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["depth-0", "depth-2"]);
    assert_eq!(cells[0]["dev_f1"]["n"], 2);
    assert!(d.join("serial/depth-2/seed-1/metrics.json").exists());
    let csv = std::fs::read_to_string(d.join("serial/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn usage_and_config_errors_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dspert(&["train", "--out", "x", "--bogus"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = dspert(
        &[
            "eval",
            "--checkpoint",
            "missing.ckpt",
            "--data",
            "missing.jsonl",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(
        d.join("bad.toml"),
        "[model]\nhead = \"biaffine\"\nspan_depth = 2\n",
    )
    .unwrap();
    let out = dspert(&["train", "--config", "bad.toml", "--out", "x"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("span_depth"));

    std::fs::write(d.join("typo.toml"), "[train]\nnumber_of_epoch = 2\n").unwrap();
    let out = dspert(&["train", "--config", "typo.toml", "--out", "x"], d);
    assert!(!out.status.success());

    let out = dspert(
        &["ablate", "depth", "--config", "bad.toml", "--out", "x"],
        d,
    );
    assert!(!out.status.success());
    assert!(!d.join("x").exists());
}

#[test]
fn analyze_rejects_biaffine_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("b.toml"),
        format!("{QUICK}[model]\nhead = \"biaffine\"\n"),
    )
    .unwrap();
    ok(&["gen-synth", "--out", "data"], d);
    ok(
        &[
            "train", "--config", "b.toml", "--out", "run", "--data", "data",
        ],
        d,
    );
    let out = dspert(
        &[
            "analyze",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "data/dev.jsonl",
            "--out",
            "an",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("biaffine"));
}
