//! End-to-end tests driving the `mathtran` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mathtran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mathtran"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn tokenize_fixture_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("formulae.txt");
    std::fs::write(&input, "(x)_n\n").unwrap();
    let out = mathtran(&["tokenize", "--lang", "latex", "--input", input.to_str().unwrap()]);
    assert_success(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "( x ) _ n\n");

    // missing input file is a usage error
    let out = mathtran(&["tokenize", "--lang", "latex", "--input", "/nonexistent.txt"]);
    assert_eq!(out.status.code(), Some(2));

    // empty input produces empty output and succeeds
    std::fs::write(&input, "").unwrap();
    let out = mathtran(&["tokenize", "--lang", "latex", "--input", input.to_str().unwrap()]);
    assert_success(&out);
    assert!(out.stdout.is_empty());
}

#[test]
fn synth_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    for (path, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let out = mathtran(&[
            "synth",
            "--seed",
            seed,
            "--count",
            "50",
            "--max-depth",
            "2",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    assert_ne!(bytes_a, std::fs::read(&c).unwrap());
}

fn run_pipeline(root: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let corpus = root.join(format!("corpus-{tag}.jsonl"));
    let data = root.join(format!("data-{tag}"));
    let run = root.join(format!("run-{tag}"));
    assert_success(&mathtran(&[
        "synth", "--seed", "3", "--count", "80", "--max-depth", "1", "--output",
        corpus.to_str().unwrap(),
    ]));
    assert_success(&mathtran(&[
        "preprocess",
        "--input", corpus.to_str().unwrap(),
        "--output-dir", data.to_str().unwrap(),
        "--seed", "3",
        "--train-fraction", "0.9",
        "--valid-fraction", "0.05",
        "--test-fraction", "0.05",
    ]));
    assert_success(&mathtran(&[
        "train",
        "--data-dir", data.to_str().unwrap(),
        "--output-dir", run.to_str().unwrap(),
        "--seed", "3",
        "--state-size", "16",
        "--layers", "1",
        "--kernel", "3",
        "--dropout", "0.0",
        "--batch-tokens", "256",
        "--max-epochs", "2",
        "--patience", "2",
    ]));
    let report = root.join(format!("report-{tag}.json"));
    assert_success(&mathtran(&[
        "evaluate",
        "--bundle", run.to_str().unwrap(),
        "--input", data.join("test.raw.jsonl").to_str().unwrap(),
        "--beam", "2",
        "--output", report.to_str().unwrap(),
    ]));
    (
        std::fs::read(run.join("train.log.jsonl")).unwrap(),
        std::fs::read(report).unwrap(),
    )
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (log1, report1) = run_pipeline(dir.path(), "one");
    let (log2, report2) = run_pipeline(dir.path(), "two");
    // the train logs embed their own output paths; compare everything else
    let strip_paths = |log: &[u8]| -> Vec<serde_json::Value> {
        String::from_utf8_lossy(log)
            .lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("checkpoint");
                v
            })
            .collect()
    };
    assert_eq!(strip_paths(&log1), strip_paths(&log2));
    assert_eq!(report1, report2);
    let parsed: serde_json::Value = serde_json::from_slice(&report1).unwrap();
    assert!(parsed["em"].is_number());
    assert!(parsed["validity_fraction"].is_number());
}

#[test]
fn train_echoes_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_success(&mathtran(&[
        "synth", "--seed", "1", "--count", "40", "--max-depth", "1", "--output",
        corpus.to_str().unwrap(),
    ]));
    assert_success(&mathtran(&[
        "preprocess",
        "--input", corpus.to_str().unwrap(),
        "--output-dir", data.to_str().unwrap(),
        "--train-fraction", "0.9",
        "--valid-fraction", "0.05",
        "--test-fraction", "0.05",
    ]));
    let out = mathtran(&[
        "train",
        "--data-dir", data.to_str().unwrap(),
        "--output-dir", run.to_str().unwrap(),
        "--max-epochs", "1",
        "--patience", "1",
    ]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for expected in [
        "state_size = 512",
        "num_layers = 11",
        "kernel_size = 3",
        "dropout_rate = 0.2",
        "learning_rate = 0.25",
        "clip_threshold = 0.1",
        "max_tokens_per_batch = 48000",
    ] {
        assert!(stdout.contains(expected), "missing {expected} in:\n{stdout}");
    }
    // the effective config is echoed into the output directory too
    let effective = std::fs::read_to_string(run.join("config.effective.toml")).unwrap();
    assert!(effective.contains("state_size = 512"));
}

#[test]
fn config_file_overrides_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let data = dir.path().join("data");
    assert_success(&mathtran(&[
        "synth", "--seed", "2", "--count", "40", "--max-depth", "1", "--output",
        corpus.to_str().unwrap(),
    ]));
    assert_success(&mathtran(&[
        "preprocess",
        "--input", corpus.to_str().unwrap(),
        "--output-dir", data.to_str().unwrap(),
        "--train-fraction", "0.9",
        "--valid-fraction", "0.05",
        "--test-fraction", "0.05",
    ]));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nstate_sise = 8\n").unwrap();
    let out = mathtran(&[
        "train",
        "--data-dir", data.to_str().unwrap(),
        "--output-dir", dir.path().join("runx").to_str().unwrap(),
        "--config", bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "unknown config keys must be rejected");

    let good = dir.path().join("good.toml");
    std::fs::write(
        &good,
        "[model]\nstate_size = 8\nnum_layers = 1\ndropout_rate = 0.0\n[train]\nmax_epochs = 1\npatience = 1\nmax_tokens_per_batch = 256\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = mathtran(&[
        "train",
        "--data-dir", data.to_str().unwrap(),
        "--output-dir", run.to_str().unwrap(),
        "--config", good.to_str().unwrap(),
        // flags beat the config file
        "--layers", "2",
    ]);
    assert_success(&out);
    let effective = std::fs::read_to_string(run.join("config.effective.toml")).unwrap();
    assert!(effective.contains("state_size = 8"));
    assert!(effective.contains("num_layers = 2"));
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("refs.jsonl");
    std::fs::write(
        &corpus,
        concat!(
            "{\"id\":\"a\",\"source\":\"(x)_n\",\"target\":\"Pochhammer[x, n]\"}\n",
            "{\"id\":\"b\",\"source\":\"\\\\sin(x)\",\"target\":\"Sin[x]\"}\n",
        ),
    )
    .unwrap();
    let preds = dir.path().join("preds.txt");
    std::fs::write(&preds, "Pochhammer[x, n]\nSin[x]\n").unwrap();
    let out = mathtran(&[
        "evaluate",
        "--input", corpus.to_str().unwrap(),
        "--predictions", preds.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("report JSON on stdout");
    assert_eq!(report["em"].as_f64().unwrap(), 1.0);
    assert!((report["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(report["ld_avg"].as_f64().unwrap(), 0.0);
}

#[test]
fn ablate_validates_the_grid_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "C512x4-C1024x8\n").unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let out = mathtran(&[
        "ablate",
        "--grid", grid.to_str().unwrap(),
        "--data-dir", data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("state size"), "stderr: {stderr}");
}
