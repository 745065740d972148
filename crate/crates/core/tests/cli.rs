//! The `wtal` binary end to end: outputs, echoes and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wtal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wtal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.num_train=10",
    "--set",
    "synth.num_test=4",
    "--set",
    "synth.snippets_range=[20,30]",
    "--set",
    "synth.feature_dim=8",
];

#[test]
fn synth_defaults_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let stdout = ok(&wtal(&["synth", "--out", s(&a)]));
    assert!(stdout.contains("80 videos over 5 classes"), "{stdout}");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["videos"].as_array().unwrap().len(), 80);
    assert_eq!(m["classes"].as_array().unwrap().len(), 5);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["synth"]["num_train"], 60);

    let mut args = vec!["synth", "--out"];
    let (b, c, d) = (tmp.path().join("b"), tmp.path().join("c"), tmp.path().join("d"));
    args.push(s(&b));
    args.extend(SMALL);
    ok(&wtal(&args));
    args[2] = s(&c);
    ok(&wtal(&args));
    args[2] = s(&d);
    args.extend(["--set", "synth.seed=5"]);
    ok(&wtal(&args));
    let read = |p: &Path| fs::read(p.join("features/test_000_rgb.d2ft")).unwrap();
    assert_eq!(read(&b), read(&c));
    assert_ne!(read(&b), read(&d));
}

#[test]
fn synth_into_invalid_dir_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain_file");
    fs::write(&file, b"x").unwrap();
    let out = wtal(&["synth", "--out", s(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("plain_file")]);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = s(tmp.path());
    assert_eq!(wtal(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wtal(&["synth"]).status.code(), Some(2));
    assert_eq!(wtal(&["synth", "--out", o, "--set", "synth.nope=1"]).status.code(), Some(2));
    assert_eq!(wtal(&["synth", "--out", o, "--set", "synth.feature_dim=7"]).status.code(), Some(2));
    assert_eq!(wtal(&["gradcheck", "--out", o, "--fault", "nope"]).status.code(), Some(2));
    assert_eq!(wtal(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_infer_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, inf, inf2, ev) = (
        tmp.path().join("data"),
        tmp.path().join("run"),
        tmp.path().join("inf"),
        tmp.path().join("inf2"),
        tmp.path().join("ev"),
    );
    let mut args = vec!["synth", "--out", s(&data)];
    args.extend(SMALL);
    ok(&wtal(&args));
    let manifest = data.join("manifest.json");
    ok(&wtal(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--set",
        "train.iterations=30",
        "--set",
        "train.batch_size=4",
    ]));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,L_Dis,L_DS,L_DV,total\n"));
    assert_eq!(log.lines().count(), 31);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["iterations"], 30);
    assert_eq!(echo["model"]["feature_dim"], 8);

    let ck = run.join("model.d2ck");
    for dir in [&inf, &inf2] {
        ok(&wtal(&["infer", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(dir)]));
    }
    let d1 = fs::read(inf.join("detections.json")).unwrap();
    assert_eq!(d1, fs::read(inf2.join("detections.json")).unwrap());

    let table = ok(&wtal(&[
        "eval",
        "--detections",
        s(&inf.join("detections.json")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&ev),
        "--ious",
        "0.1,0.2,0.3,0.4,0.5",
    ]));
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["mAP@IoU", "0.10", "0.20", "0.30", "0.40", "0.50", "AVG", "F1@0.5"]);
    assert_eq!(table.lines().nth(1).unwrap().split_whitespace().count(), 7);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_iou_map"].as_object().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(ev.join("report.txt")).unwrap(), table);

    // A checkpoint with a damaged header is a domain error.
    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] = b'Z';
    fs::write(&ck, bytes).unwrap();
    let out = wtal(&["infer", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&inf)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));
}

#[test]
fn gradcheck_reports_and_fails_on_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&wtal(&["gradcheck", "--out", s(tmp.path())]));
    for name in ["loss/discriminative", "loss/pdmi_snippet", "loss/pdmi_video", "loss/total_end_to_end"] {
        assert!(stdout.lines().any(|l| l.starts_with("ok") && l.contains(name)), "{stdout}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|r| r["max_rel_err"].as_f64().unwrap() < 1e-4));

    let out = wtal(&["gradcheck", "--out", s(tmp.path()), "--seeds", "0", "--fault", "log_condition_number"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("op/log_condition_number")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("op/log_condition_number"));
}

#[test]
fn pdmi_study_csv() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&wtal(&["pdmi-study", "--out", s(tmp.path()), "--samples", "300", "--plant-identity"]));
    let csv = fs::read_to_string(tmp.path().join("pdmi_study.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "log_eta,log_abs_det");
    assert_eq!(lines.len(), 301);
    assert_eq!(lines[1], "0,0");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("pdmi_study.json")).unwrap()).unwrap();
    assert!(summary["pearson"].as_f64().unwrap() < 0.0);
}

#[test]
fn ablate_small() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--out",
        s(tmp.path()),
        "--seeds",
        "0",
        "--variants",
        "focal,full",
        "--set",
        "train.iterations=10",
        "--set",
        "train.batch_size=4",
    ];
    args.extend(SMALL);
    let table = ok(&wtal(&args));
    assert!(table.contains("focal") && table.contains("full"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}
