//! End-to-end binary tests: reproducible synthesis, the three training
//! modes, translation output contracts, eval reports, resume, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn secoco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secoco"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = secoco(dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_args() -> Vec<&'static str> {
    vec![
        "--set",
        "splits.train=300",
        "--set",
        "splits.valid=60",
        "--set",
        "splits.test=60",
        "--set",
        "model.d_model=16",
        "--set",
        "model.n_enc_layers=1",
        "--set",
        "model.n_dec_layers=1",
        "--set",
        "model.d_ffn=32",
        "--set",
        "train.max_steps=80",
        "--set",
        "train.warmup_steps=20",
        "--set",
        "train.batch_tokens=300",
        "--set",
        "train.eval_interval=40",
        "--set",
        "train.valid_cap=30",
        "--set",
        "beam=2",
    ]
}

#[test]
fn synth_same_seed_writes_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "5", "--out", "a"];
    args.extend(tiny_args());
    ok(dir.path(), &args);
    let mut args = vec!["synth", "--seed", "5", "--out", "b"];
    args.extend(tiny_args());
    ok(dir.path(), &args);
    for f in ["src.vocab", "tgt.vocab", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "file {f} differs between identical seeds");
    }
}

#[test]
fn synth_stats_track_nominal_rates_on_large_corpus() {
    // law of large numbers at 10k sentences with the edit budget lifted
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "synth",
            "--seed",
            "9",
            "--set",
            "splits.train=10000",
            "--set",
            "splits.valid=0",
            "--set",
            "splits.test=0",
            "--set",
            "noise.max_edits=100",
        ],
    );
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/synth_meta.json")).unwrap())
            .unwrap();
    let stats = &meta["stats"]["counts"];
    let positions = stats["positions"].as_f64().unwrap();
    let del_rate = stats["deletions"].as_f64().unwrap() / positions;
    assert!(
        (del_rate - 0.1).abs() / 0.1 < 0.1,
        "empirical deletion rate {del_rate} outside ±10% of 0.1"
    );
    assert!(out.contains("random deletion"));
    assert!(stats["typos"].as_f64().unwrap() > 0.0);
}

#[test]
fn pipeline_trains_translates_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth", "--seed", "11"];
    synth.extend(tiny_args());
    ok(dir.path(), &synth);

    // secoco mode logs all three loss components
    let mut train = vec!["train", "--seed", "11", "--mode", "secoco"];
    train.extend(tiny_args());
    ok(dir.path(), &train);
    let metrics = fs::read_to_string(dir.path().join("runs/secoco/metrics.jsonl")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().contains("\"config\""));
    let entry: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    for key in ["loss", "nll", "del", "ins", "lr"] {
        assert!(entry.get(key).is_some(), "missing {key} in secoco metrics");
    }

    // base mode omits the predictor terms
    let mut train = vec!["train", "--seed", "11", "--mode", "base"];
    train.extend(tiny_args());
    ok(dir.path(), &train);
    let metrics = fs::read_to_string(dir.path().join("runs/base/metrics.jsonl")).unwrap();
    let entry: serde_json::Value =
        serde_json::from_str(metrics.lines().nth(1).unwrap()).unwrap();
    assert!(entry.get("del").is_none());
    assert!(entry.get("ins").is_none());

    // translation: empty input line maps to empty output line, no crash
    fs::write(dir.path().join("input.txt"), "ka lu mi\n\nan be ce\n").unwrap();
    let mut tr = vec![
        "translate",
        "--checkpoint",
        "runs/secoco/best.ckpt",
        "--input",
        "input.txt",
        "--mode",
        "e2e",
        "--out",
        "out_e2e.txt",
    ];
    tr.extend(tiny_args());
    ok(dir.path(), &tr);
    let out = fs::read_to_string(dir.path().join("out_e2e.txt")).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");

    // edit mode with --show-edits writes a trace file alongside
    let mut tr = vec![
        "translate",
        "--checkpoint",
        "runs/secoco/best.ckpt",
        "--input",
        "input.txt",
        "--mode",
        "edit",
        "--show-edits",
        "--out",
        "out_edit.txt",
    ];
    tr.extend(tiny_args());
    ok(dir.path(), &tr);
    assert_eq!(
        fs::read_to_string(dir.path().join("out_edit.txt"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let edits = fs::read_to_string(dir.path().join("out_edit.edits")).unwrap();
    assert!(edits.contains("sentence 1"), "edits file: {edits:?}");

    // eval writes one block per requested mode plus shared edit scores
    let mut ev = vec![
        "eval",
        "--checkpoint",
        "runs/secoco/best.ckpt",
        "--modes",
        "e2e,edit",
        "--out",
        "report.json",
        "--worst",
        "3",
        "--set",
        "latency_cap=5",
    ];
    ev.extend(tiny_args());
    let stdout = ok(dir.path(), &ev);
    assert!(stdout.contains("\"modes\""));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for mode in ["e2e", "edit"] {
        let block = &report["modes"][mode];
        assert!(block["bleu"].is_number(), "no bleu in {mode} block");
        assert!(block["latency_ms"].is_number());
        assert!(block["edit"]["del_f1"].is_number());
    }
    assert!(report["modes"]["edit"]["avg_iterations"].is_number());
    assert!(report["config"]["seed"].is_number(), "config echo missing");
    assert!(dir.path().join("report.worst.txt").exists());
}

#[test]
fn resume_continues_to_the_full_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth", "--seed", "13"];
    synth.extend(tiny_args());
    ok(dir.path(), &synth);

    // interrupted run: stops at step 40 with a checkpoint
    let mut short = vec![
        "train",
        "--seed",
        "13",
        "--mode",
        "secoco",
        "--set",
        "train.max_steps=40",
    ];
    short.extend(tiny_args());
    ok(dir.path(), &short);

    let mut resume = vec!["train", "--seed", "13", "--mode", "secoco", "--resume"];
    resume.extend(tiny_args());
    ok(dir.path(), &resume);
    let metrics = fs::read_to_string(dir.path().join("runs/secoco/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("step").and_then(|s| s.as_u64()))
        .collect();
    assert!(steps.contains(&40), "checkpointed step missing: {steps:?}");
    assert_eq!(*steps.last().unwrap(), 80, "resume did not reach max_steps");
    // appended log continues strictly forward
    let after: Vec<u64> = steps.iter().copied().skip_while(|&s| s != 40).collect();
    assert!(after.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn missing_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // train without synth
    let out = secoco(dir.path(), &["train", "--seed", "1"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    // translate with missing checkpoint
    fs::write(dir.path().join("x.txt"), "an be\n").unwrap();
    let mut synth = vec!["synth", "--seed", "1"];
    synth.extend(tiny_args());
    ok(dir.path(), &synth);
    let out = secoco(
        dir.path(),
        &[
            "translate",
            "--checkpoint",
            "nope.ckpt",
            "--input",
            "x.txt",
        ],
    );
    assert!(!out.status.success());

    // eval without a checkpoint
    let out = secoco(dir.path(), &["eval"]);
    assert!(!out.status.success());

    // bad mode string
    let out = secoco(dir.path(), &["train", "--mode", "sideways"]);
    assert!(!out.status.success());
}

#[test]
fn vocab_checkpoint_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut synth = vec!["synth", "--seed", "3"];
    synth.extend(tiny_args());
    ok(dir.path(), &synth);
    let mut train = vec![
        "train",
        "--seed",
        "3",
        "--mode",
        "base",
        "--set",
        "train.max_steps=10",
    ];
    train.extend(tiny_args());
    ok(dir.path(), &train);

    // re-synthesize with a smaller alphabet: vocab no longer matches
    let mut resynth = vec![
        "synth",
        "--seed",
        "3",
        "--set",
        r#"task.src_alphabet=["an","be","ce"]"#,
        "--set",
        r#"task.mapping={"an":"AN","be":"BE","ce":"CE"}"#,
    ];
    resynth.extend(tiny_args());
    ok(dir.path(), &resynth);
    fs::write(dir.path().join("x.txt"), "an be\n").unwrap();
    let out = secoco(
        dir.path(),
        &[
            "translate",
            "--checkpoint",
            "runs/base/best.ckpt",
            "--input",
            "x.txt",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}
