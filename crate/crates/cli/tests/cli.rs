use std::path::Path;
use std::process::{Command, Output};

fn portrait(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portrait")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = "epochs = 1\nbatch_size = 4\nseed = 3\ncheckpoint_every = 0\n\n[model]\nbase_filters = 2\ndisc_base_filters = 2\nhidden_dim = 4\ndisc_hidden = 4\nembedding_dim = 4\n";

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&portrait(&["dataset-synth", "--out", "data", "--count", "20", "--seed", "1"], d));
    assert!(d.join("data/train.jsonl").exists() && d.join("data/schema.toml").exists());

    ok(&portrait(&["embed-train", "--manifest", "data/manifest.jsonl", "--dim", "4", "--epochs", "3", "--out", "emb.bin"], d));
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&portrait(
        &["train", "--config", "tiny.toml", "--manifest", "data/train.jsonl", "--embeddings", "emb.bin", "--out", "run"],
        d,
    ));
    assert!(d.join("run/checkpoint/manifest.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap().lines().count(), 5);

    let report = ok(&portrait(
        &["eval", "--checkpoint", "run/checkpoint", "--manifest", "data/manifest.jsonl", "--report", "report.json", "--splits", "2"],
        d,
    ));
    assert!(report.contains("fscore.HairColor\t") && report.contains("fscore.average\t"), "{report}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert!(json["fscore"]["average"].as_f64().is_some());

    let echo = ok(&portrait(
        &[
            "generate", "--checkpoint", "run/checkpoint", "--photo", "data/photos/00000.png",
            "--attr", "hair_color=Blond", "--attr", "Mouth=Smile", "--out", "out.png",
        ],
        d,
    ));
    assert!(echo.contains("\"HairColor\":\"Blond\""), "{echo}");
    assert!(d.join("out.png").exists());

    let bad = portrait(&["generate", "--checkpoint", "run/checkpoint", "--photo", "data/photos/00000.png", "--attr", "Hair:Black", "--out", "x.png"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!d.join("x.png").exists());
    let unknown = portrait(&["generate", "--checkpoint", "run/checkpoint", "--photo", "data/photos/00000.png", "--attr", "Mood=Calm", "--out", "x.png"], d);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Mood"));
    assert!(!d.join("x.png").exists());
}

#[test]
fn synthesis_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&portrait(&["dataset-synth", "--out", out, "--count", "5", "--seed", "9"], d));
    }
    for f in ["manifest.jsonl", "photos/00003.png", "portraits/00004.png"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
}

#[test]
fn bad_invocations_fail_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(portrait(&["train", "--bogus"], d).status.code(), Some(2));
    let missing = portrait(&["train", "--manifest", "nope.jsonl", "--out", "run"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!d.join("run").exists());
    std::fs::write(d.join("bad.toml"), "epochz = 1\n").unwrap();
    std::fs::write(d.join("m.jsonl"), "").unwrap();
    let bad = portrait(&["train", "--config", "bad.toml", "--manifest", "m.jsonl", "--out", "run"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!d.join("run").exists());
}
