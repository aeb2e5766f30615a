//! The `uqd` binary: exit codes, error messages and report contents.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uqd_core::report::parse_metrics_csv;

fn uqd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqd"))
        .args(args)
        .env("UQD_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = uqd(args);
    assert!(
        out.status.success(),
        "uqd {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf")
}

/// Data plus a two-member ensemble under `out`.
fn prepared(out: &Path) -> [String; 4] {
    let conf = tiny().display().to_string();
    let out = out.display().to_string();
    let train = format!("{out}/train");
    let test = format!("{out}/test");
    ok(&["gen-data", "--config", &conf, "--out", &out]);
    ok(&[
        "train-ensemble",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
    ]);
    [conf, out, train, test]
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(uqd(&["--help"]).status.code(), Some(0));
    assert_eq!(uqd(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_flags_and_values_exit_one() {
    assert_eq!(uqd(&["frobnicate"]).status.code(), Some(1));
    let out = uqd(&["gen-data", "--lr", "fast"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lr"));
    assert_eq!(uqd(&["train"]).status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("sub").display().to_string();
    let res = uqd(&[
        "gen-data",
        "--config",
        &tiny().display().to_string(),
        "--out",
        &out,
    ]);
    assert_eq!(
        res.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn missing_manifest_exits_two() {
    let res = uqd(&["train", "--data", "/nonexistent/manifest.txt"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_teachers_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let [conf, out, train, _] = prepared(dir.path());
    let res = uqd(&[
        "distill",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--teachers",
        "/nope/a.ckpt,/nope/b.ckpt",
    ]);
    assert_eq!(res.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&res.stderr);
    assert!(
        msg.contains("/nope/a.ckpt") && msg.contains("/nope/b.ckpt"),
        "{msg}"
    );

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let res = uqd(&[
        "distill",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--teachers",
        &empty.display().to_string(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn evaluate_reports_and_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let [conf, out, _, test] = prepared(dir.path());
    let res = uqd(&[
        "evaluate",
        "--config",
        &conf,
        "--out",
        &out,
        "--test-data",
        &test,
    ]);
    assert_eq!(
        res.status.code(),
        Some(1),
        "mcd.ckpt and students are absent"
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("mcd.ckpt"));

    ok(&[
        "evaluate",
        "--config",
        &conf,
        "--out",
        &out,
        "--test-data",
        &test,
        "--methods",
        "baseline,de,gt",
    ]);
    let root = Path::new(&out);
    let csv = std::fs::read_to_string(root.join("reports/metrics.csv")).unwrap();
    let rows = parse_metrics_csv(&csv, "metrics.csv").unwrap();
    let names: Vec<&str> = rows.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(names, ["baseline", "de", "gt"]);
    let gt = &rows[2].1;
    assert_eq!((gt.dsc, gt.ece, gt.brier), (1.0, 0.0, 0.0));
    assert!(rows[1].1.nll.is_finite());

    for m in ["baseline", "de", "gt"] {
        for f in [
            format!("reports/per_image_{m}.csv"),
            format!("reports/reliability_{m}.csv"),
            format!("figures/reliability_{m}.svg"),
            format!("maps/{m}/img_000_prob.pfm"),
            format!("maps/{m}/img_000_entropy.pfm"),
        ] {
            assert!(root.join(&f).is_file(), "{f}");
        }
        let svg =
            std::fs::read_to_string(root.join(format!("figures/reliability_{m}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants().filter(|n| n.has_tag_name("rect")).count(),
            10
        );
        assert_eq!(
            doc.descendants().filter(|n| n.has_tag_name("path")).count(),
            1
        );
    }
    assert!(root.join("resolved-config.txt").is_file());

    ok(&["report", "--out", &out]);
    let summary = std::fs::read_to_string(root.join("reports/summary.md")).unwrap();
    for m in ["baseline", "de", "gt"] {
        assert!(
            summary.contains(&format!("figures/reliability_{m}.svg")),
            "{summary}"
        );
    }
}

#[test]
fn single_member_ensemble_equals_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny().display().to_string();
    let out = dir.path().display().to_string();
    let train = format!("{out}/train");
    let test = format!("{out}/test");
    ok(&["gen-data", "--config", &conf, "--out", &out]);
    ok(&[
        "train-ensemble",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--members",
        "1",
    ]);
    ok(&[
        "evaluate",
        "--config",
        &conf,
        "--out",
        &out,
        "--test-data",
        &test,
        "--methods",
        "baseline,de",
    ]);
    let csv = std::fs::read_to_string(dir.path().join("reports/metrics.csv")).unwrap();
    let rows = parse_metrics_csv(&csv, "metrics.csv").unwrap();
    assert_eq!(rows[0].1, rows[1].1);
}

#[test]
fn predict_writes_maps_and_resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let [conf, out, train, _] = prepared(dir.path());
    ok(&[
        "train",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--name",
        "mcd",
        "--dropout",
        "0.2",
    ]);
    let image = format!("{out}/test/img_000.pgm");
    for ckpts in [
        format!("{out}/checkpoints"),
        format!("{out}/checkpoints/mcd.ckpt"),
    ] {
        ok(&[
            "predict",
            "--config",
            &conf,
            "--out",
            &out,
            "--checkpoints",
            &ckpts,
            "--image",
            &image,
            "--measure",
            "mi",
        ]);
        let map = uqd_core::io::read_pfm(&Path::new(&out).join("maps/img_000_prob.pfm")).unwrap();
        assert_eq!(map.clamped, 0);
        assert!(Path::new(&out).join("maps/img_000_mi.pfm").is_file());
    }
    // the dumped configuration is itself a valid config file
    let resolved = format!("{out}/resolved-config.txt");
    ok(&[
        "gen-data",
        "--config",
        &resolved,
        "--out",
        &format!("{out}/again"),
    ]);
}

fn log_column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines
        .next()
        .unwrap()
        .split(',')
        .position(|h| h == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().ok())
        .collect()
}

#[test]
fn distill_logs_route_terms_by_mode() {
    let dir = tempfile::tempdir().unwrap();
    let [conf, out, train, _] = prepared(dir.path());
    let teachers = format!("{out}/checkpoints");
    ok(&[
        "distill",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--mode",
        "kl",
        "--teachers",
        &teachers,
        "--epochs",
        "20",
        "--task-weight",
        "0",
    ]);
    let kl: Vec<f64> = log_column(&dir.path().join("logs/distill_kl.csv"), "kl_term")
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let half = kl.len() / 2;
    let early = kl[..half].iter().sum::<f64>() / half as f64;
    let late = kl[half..].iter().sum::<f64>() / (kl.len() - half) as f64;
    assert!(late < early, "{early} -> {late}");
    assert!(dir.path().join("checkpoints/student_kl.ckpt").is_file());

    ok(&[
        "distill",
        "--config",
        &conf,
        "--out",
        &out,
        "--data",
        &train,
        "--mode",
        "crd",
        "--temperature",
        "0.07",
    ]);
    let log = dir.path().join("logs/distill_crd.csv");
    assert!(log_column(&log, "crd_term").iter().all(Option::is_some));
    assert!(log_column(&log, "kl_term").iter().all(Option::is_none));
}

#[test]
fn gen_data_prints_a_stable_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub).display().to_string();
        ok(&[
            "gen-data", "--seed", "7", "--n", "30", "--size", "64", "--out", &out,
        ])
    };
    let first = run("a");
    assert_eq!(first, run("b").replace("/b/", "/a/"));
    let manifest = std::fs::read_to_string(dir.path().join("a/train/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 30);
    let golden = include_str!("../../core/tests/golden/synth_seed7.sha256").trim();
    assert!(first.contains(golden), "{first}");
}

#[test]
fn ensemble_members_are_distinct_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let [conf, out, train, _] = prepared(dir.path());
    let again = format!("{out}/again");
    ok(&[
        "train-ensemble",
        "--config",
        &conf,
        "--out",
        &again,
        "--data",
        &train,
    ]);
    let read = |root: &str, m: usize| {
        std::fs::read(format!("{root}/checkpoints/member_{m}.ckpt")).unwrap()
    };
    assert_ne!(read(&out, 0), read(&out, 1));
    for m in 0..2 {
        assert_eq!(read(&out, m), read(&again, m));
    }
}

/// Several minutes on one core: `cargo test --release -p uqd-cli -- --ignored`.
#[test]
#[ignore]
fn desk_pipeline_reproduces_golden_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/desk.conf")
        .display()
        .to_string();
    let out = dir.path().display().to_string();
    let train = format!("{out}/train");
    let test = format!("{out}/test");
    let base = ["--config", conf.as_str(), "--out", out.as_str()];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        ok(&args);
    };
    run("gen-data", &[]);
    run("train-ensemble", &["--data", &train]);
    run(
        "train",
        &["--data", &train, "--name", "mcd", "--dropout", "0.2"],
    );
    run("distill", &["--data", &train, "--mode", "kl"]);
    run("distill", &["--data", &train, "--mode", "crd"]);
    run("evaluate", &["--test-data", &test]);
    let got = std::fs::read_to_string(dir.path().join("reports/metrics.csv")).unwrap();
    assert_eq!(got, include_str!("golden/desk_metrics.csv"));
}
