use std::path::Path;
use std::process::{Command, Output};

fn camfusion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camfusion"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &[&str] = &[
    "gen-synth", "--classes", "4", "--per-class", "6", "--views", "6", "--dim", "16",
    "--seed", "3", "--quiet",
];

#[test]
fn unknown_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = camfusion(dir.path(), &["gen-synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = camfusion(dir.path(), &["fuse", "--data", "absent.ndjson"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ndjson"));
}

#[test]
fn learned_fusion_without_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&camfusion(dir.path(), SMALL));
    let out = camfusion(dir.path(), &["fuse", "--data", "dataset.ndjson", "--fusion", "learned"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_synth_is_deterministic_and_writes_a_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&camfusion(a.path(), SMALL));
    ok(&camfusion(b.path(), SMALL));
    for f in ["dataset.ndjson", "vocab.ndjson", "run_manifest.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-synth");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["num_classes"], 4);
}

#[test]
fn manifest_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&camfusion(a.path(), SMALL));
    let manifest = a.path().join("run_manifest.json");
    ok(&camfusion(
        b.path(),
        &["gen-synth", "--config", manifest.to_str().unwrap(), "--quiet"],
    ));
    assert_eq!(
        std::fs::read(a.path().join("dataset.ndjson")).unwrap(),
        std::fs::read(b.path().join("dataset.ndjson")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"num_classes": 3, "instances_per_class": 2, "views_per_instance": 4, "descriptor_dim": 24}"#,
    )
    .unwrap();
    ok(&camfusion(dir.path(), &["gen-synth", "--config", "cfg.json", "--classes", "5", "--quiet"]));
    let vocab = std::fs::read_to_string(dir.path().join("vocab.ndjson")).unwrap();
    assert_eq!(vocab.lines().count(), 5);
    let data = std::fs::read_to_string(dir.path().join("dataset.ndjson")).unwrap();
    // header plus five classes of two
    assert_eq!(data.lines().count(), 11);
}

#[test]
fn train_fuse_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&camfusion(d, &[
        "gen-synth", "--classes", "4", "--per-class", "10", "--views", "6", "--dim", "16",
        "--test-fraction", "0.2", "--quiet",
    ]));
    for f in ["train.ndjson", "test.ndjson", "vocab.ndjson"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    ok(&camfusion(d, &[
        "train", "--data", "train.ndjson", "--vocab", "vocab.ndjson", "--epochs", "2",
        "--batch-size", "8", "--model-dim", "8", "--blocks", "1", "--heads", "2",
        "--mlp-hidden", "16", "--out-dir", "run", "--quiet",
    ]));
    let run = d.join("run");
    for f in ["model.json", "model.bin", "train_log.ndjson", "run_manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "lr", "loss_class", "loss_total", "wall_ms"] {
        assert!(first.get(key).is_some(), "log record lacks {key}");
    }

    ok(&camfusion(d, &[
        "fuse", "--data", "test.ndjson", "--fusion", "learned", "--checkpoint", "run/model.json",
        "--out-dir", "fused", "--quiet",
    ]));
    let fused = std::fs::read_to_string(d.join("fused/fused.ndjson")).unwrap();
    assert_eq!(
        fused.lines().count(),
        std::fs::read_to_string(d.join("test.ndjson")).unwrap().lines().count() - 1
    );

    let out = camfusion(d, &[
        "eval", "--data", "test.ndjson", "--vocab", "vocab.ndjson", "--fused",
        "fused/fused.ndjson", "--checkpoint", "run/model.json", "--out-dir", "eval",
    ]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("top1_accuracy"));
    assert!(table.contains("mIoU"));
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["fusion"], "learned");
    let acc = metrics["top1_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = camfusion(d, &[
        "eval", "--data", "test.ndjson", "--vocab", "vocab.ndjson", "--fusion", "l1med",
        "--task", "semantic", "--out-dir", "eval_med", "--quiet",
    ]);
    ok(&out);
    assert!(out.stdout.is_empty());
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("eval_med/metrics.json")).unwrap()).unwrap();
    assert!(metrics["instance_top1"].is_null());
    assert!(metrics["semantic"]["miou"].is_number());
}

#[test]
fn gradcheck_subcommand_reports_ops() {
    let dir = tempfile::tempdir().unwrap();
    let out = camfusion(dir.path(), &["gradcheck", "--op", "matmul", "--op", "softmax", "--cases", "5"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("matmul") && text.contains("PASS"));
    assert!(dir.path().join("gradcheck.json").exists());

    let out = camfusion(dir.path(), &["gradcheck", "--op", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}
