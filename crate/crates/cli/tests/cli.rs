use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn camplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camplan"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = camplan(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trajectory file holding the dataset's own cameras.
fn truth_as_prediction(data: &Path, out: &Path) {
    let text = std::fs::read_to_string(data).unwrap();
    let mut lines = vec![r#"{"format":"camplan-trajectories","version":1,"seed":0}"#.to_string()];
    for (i, line) in text.lines().skip(1).enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        lines.push(
            serde_json::json!({"index": i, "fps": v["fps"], "camera": v["camera"]}).to_string(),
        );
    }
    std::fs::write(out, lines.join("\n") + "\n").unwrap();
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["synth", "--count", "8", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--count", "8", "--seed", "7", "--out", s(&b)]);
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);
    let first = String::from_utf8(x)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(first.contains("\"seed\":7"), "{first}");
}

#[test]
fn eval_of_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let pred = dir.path().join("p.jsonl");
    let report = dir.path().join("r.txt");
    ok(&["synth", "--count", "4", "--seed", "2", "--out", s(&data)]);
    truth_as_prediction(&data, &pred);
    ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--truth",
        s(&data),
        "--report",
        s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("# camplan "));
    let mean = text
        .lines()
        .find(|l| l.trim_start().starts_with("mean"))
        .unwrap();
    let cols: Vec<&str> = mean.split_whitespace().collect();
    assert_eq!(cols[6].parse::<f64>().unwrap(), 0.0, "{mean}");
    assert_eq!(cols[7].parse::<f64>().unwrap(), 1.0, "{mean}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(camplan(&["train"]).status.code(), Some(2));
    assert_eq!(camplan(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "colour = red\n").unwrap();
    let out = camplan(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let data = dir.path().join("d.jsonl");
    ok(&["synth", "--count", "2", "--out", s(&data)]);
    truth_as_prediction(&data, &dir.path().join("p.jsonl"));
    let out = camplan(&[
        "classify",
        "--pred",
        s(&dir.path().join("p.jsonl")),
        "--data",
        s(&data),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_name_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["synth", "--count", "3", "--out", s(&data)]);
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"version\": 1, \"broken\": true}";
    std::fs::write(&data, lines.join("\n")).unwrap();
    let out = camplan(&["pnp", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("record 1"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "count = 3\nseed = 5\n").unwrap();
    let a = dir.path().join("a.jsonl");
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("\"seed\":5"));
    ok(&["synth", "--config", s(&cfg), "--count", "2", "--out", s(&a)]);
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 3);
}

#[test]
fn pnp_viz_and_offline_classify() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let pred = dir.path().join("p.jsonl");
    ok(&["synth", "--count", "3", "--seed", "4", "--out", s(&data)]);
    ok(&["pnp", "--data", s(&data), "--out", s(&pred)]);
    let out = ok(&[
        "classify",
        "--pred",
        s(&pred),
        "--data",
        s(&data),
        "--offline",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    let viz = dir.path().join("viz");
    ok(&["viz", "--data", s(&data), "--sample", "1", "--out", s(&viz)]);
    let doc = std::fs::read_to_string(viz.join("triview_1.svg")).unwrap();
    for id in ["top", "front", "side"] {
        assert!(doc.contains(&format!("<g id=\"{id}\"")));
    }
    assert!(viz.join("overlay_1_0.svg").exists());
    assert_eq!(
        camplan(&["viz", "--data", s(&data), "--sample", "9", "--out", s(&viz)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn smoke_pipeline_within_budget() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let ckpt = dir.path().join("m.ck");
    let log = dir.path().join("train.log");
    let pred = dir.path().join("p.jsonl");
    let report = dir.path().join("r.txt");
    ok(&["synth", "--count", "8", "--seed", "1", "--out", s(&data)]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--steps",
        "200",
        "--lr",
        "1e-3",
        "--log",
        s(&log),
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 200);
    ok(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&pred),
        "--sample-steps",
        "20",
    ]);
    ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--truth",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert!(start.elapsed().as_secs() < 300, "{:?}", start.elapsed());

    // Same flags, same bytes.
    let pred2 = dir.path().join("p2.jsonl");
    ok(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&pred2),
        "--sample-steps",
        "20",
    ]);
    assert_eq!(
        std::fs::read(&pred).unwrap(),
        std::fs::read(&pred2).unwrap()
    );
}
