//! End-to-end tests of the `fera` binary: output schemas, determinism,
//! error paths and CSV/SVG consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fera() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fera"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = fera().args(args).output().expect("spawn fera");
    assert!(
        out.status.success(),
        "fera {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|_| panic!("missing {name}"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fera-cli-{name}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

#[test]
fn analyze_rows_and_determinism() {
    let d1 = tmp("an1");
    let d2 = tmp("an2");
    for d in [&d1, &d2] {
        run_ok(&[
            "analyze",
            "--out",
            d.to_str().unwrap(),
            "--set",
            "schedule.t=60",
            "--set",
            "field.size=64",
        ]);
    }
    let csv = read(&d1, "evolution.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,alpha_bar,e1,e2,e3");
    assert_eq!(lines.len(), 1 + 61); // header + T+1 rows
    for line in &lines[1..] {
        let cells: Vec<f64> = line.split(',').skip(2).map(|c| c.parse().unwrap()).collect();
        let s: f64 = cells.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row not simplex: {line}");
        assert!(cells.iter().all(|&c| c >= 0.0));
    }
    // byte-identical rerun
    assert_eq!(csv, read(&d2, "evolution.csv"));
    assert_eq!(read(&d1, "evolution.svg"), read(&d2, "evolution.svg"));
    // clean power-law fields are low-band dominant; pure noise is flatter
    let first: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let last: f64 = lines.last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(first > last, "low band at t=0 ({first}) !> at t=T ({last})");
    // manifest records the outputs
    let manifest = read(&d1, "manifest.txt");
    assert!(manifest.contains("output evolution.csv"));
    assert!(manifest.trim_end().ends_with("status ok"));
    for d in [&d1, &d2] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn analyze_svg_matches_csv_data() {
    let d = tmp("ansvg");
    run_ok(&[
        "analyze",
        "--out",
        d.to_str().unwrap(),
        "--set",
        "schedule.t=40",
        "--set",
        "field.size=32",
    ]);
    let csv = read(&d, "evolution.csv");
    let rows = csv.lines().count() - 1;
    let svg = read(&d, "evolution.svg");
    assert!(svg.starts_with("<svg xmlns="));
    // one polyline per band, each with one point per CSV row
    let polylines: Vec<&str> = svg
        .lines()
        .filter(|l| l.starts_with("<polyline"))
        .collect();
    assert_eq!(polylines.len(), 3);
    for p in polylines {
        let pts = p.split("points=\"").nth(1).unwrap();
        let n = pts.split('"').next().unwrap().split(' ').count();
        assert_eq!(n, rows);
    }
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn snr_crossings_monotone_and_schema() {
    let d = tmp("snr3");
    run_ok(&[
        "snr",
        "--out",
        d.to_str().unwrap(),
        "--set",
        "schedule.t=200",
        "--set",
        "field.size=64",
    ]);
    let crossings = read(&d, "crossings.csv");
    let stars: Vec<usize> = crossings
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(stars.len(), 3);
    assert!(stars[0] >= stars[1] && stars[1] >= stars[2], "{stars:?}");
    std::fs::remove_dir_all(&d).ok();

    // two-band bank yields exactly two crossing entries
    let d2 = tmp("snr2");
    run_ok(&[
        "snr",
        "--out",
        d2.to_str().unwrap(),
        "--set",
        "schedule.t=100",
        "--set",
        "field.size=64",
        "--set",
        "bank.n_bands=2",
    ]);
    assert_eq!(read(&d2, "crossings.csv").lines().count(), 1 + 2);
    std::fs::remove_dir_all(&d2).ok();
}

#[test]
fn snr_flat_spectrum_control() {
    // gamma = 0: crossings land close together; the monotonicity assert is
    // switched off for this control configuration
    let d = tmp("snr0");
    run_ok(&[
        "snr",
        "--out",
        d.to_str().unwrap(),
        "--set",
        "schedule.t=400",
        "--set",
        "field.size=64",
        "--set",
        "data.gamma=0",
        "--set",
        "snr.assert_monotone=false",
    ]);
    let stars: Vec<i64> = read(&d, "crossings.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let spread = stars.iter().max().unwrap() - stars.iter().min().unwrap();
    assert!(spread <= 40, "flat-spectrum crossings spread {spread} of 400");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn unknown_config_key_names_the_key() {
    let d = tmp("badkey");
    let out = fera()
        .args([
            "analyze",
            "--out",
            d.to_str().unwrap(),
            "--set",
            "spectrum.bogus=1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("spectrum.bogus"), "stderr: {err}");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn adapt_without_base_checkpoint_is_config_error() {
    let d = tmp("nockpt");
    let out = fera()
        .args([
            "train",
            "--out",
            d.to_str().unwrap(),
            "--set",
            "train.mode=adapt",
            "--set",
            "train.steps=1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("base_ckpt"), "stderr: {err}");
    // the manifest flags the failure
    let manifest = read(&d, "manifest.txt");
    assert!(manifest.contains("status error"));
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn train_zero_steps_checkpoint_matches_init_rerun() {
    let d1 = tmp("t0a");
    let d2 = tmp("t0b");
    for d in [&d1, &d2] {
        run_ok(&[
            "train",
            "--out",
            d.to_str().unwrap(),
            "--set",
            "train.mode=pretrain",
            "--set",
            "train.steps=0",
            "--set",
            "data.train_count=4",
            "--set",
            "data.val_count=2",
        ]);
    }
    let a = std::fs::read(d1.join("model.ckpt")).unwrap();
    let b = std::fs::read(d2.join("model.ckpt")).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
    std::fs::remove_dir_all(&d1).ok();
    std::fs::remove_dir_all(&d2).ok();
}

#[test]
fn full_pipeline_train_sample_compare_ablate() {
    let base = tmp("pipe");
    std::fs::create_dir_all(&base).unwrap();
    let pre = base.join("pre");
    run_ok(&[
        "train",
        "--out",
        pre.to_str().unwrap(),
        "--set",
        "train.mode=pretrain",
        "--set",
        "train.steps=30",
        "--set",
        "data.train_count=16",
        "--set",
        "data.val_count=8",
        "--set",
        "train.val_every=50",
    ]);
    let ckpt = pre.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap().to_string();

    // adapt with band-boost data
    let adapt = base.join("adapt");
    run_ok(&[
        "train",
        "--out",
        adapt.to_str().unwrap(),
        "--set",
        "train.mode=adapt",
        "--set",
        &format!("train.base_ckpt={ckpt_s}"),
        "--set",
        "train.steps=10",
        "--set",
        "data.kind=band_boost",
        "--set",
        "data.train_count=16",
        "--set",
        "data.val_count=8",
        "--set",
        "train.val_every=50",
    ]);
    let train_csv = read(&adapt, "train.csv");
    assert_eq!(
        train_csv.lines().next().unwrap(),
        "step,loss_denoise,loss_fecl,loss_total,routing_entropy"
    );
    assert_eq!(train_csv.lines().count(), 1 + 10);

    // deterministic sampling
    let s1 = base.join("s1");
    let s2 = base.join("s2");
    let actt = adapt.join("model.ckpt");
    for s in [&s1, &s2] {
        run_ok(&[
            "sample",
            "--out",
            s.to_str().unwrap(),
            "--set",
            &format!("sample.ckpt={}", actt.to_str().unwrap()),
            "--set",
            "sample.count=2",
            "--set",
            "sample.steps=5",
        ]);
    }
    assert_eq!(
        std::fs::read(s1.join("sample_000.ft")).unwrap(),
        std::fs::read(s2.join("sample_000.ft")).unwrap()
    );
    assert_eq!(read(&s1, "samples.csv"), read(&s2, "samples.csv"));

    // route comparison: heatmap column count = sampler steps, one switch
    let rc = base.join("rc");
    run_ok(&[
        "route-compare",
        "--out",
        rc.to_str().unwrap(),
        "--set",
        &format!("compare.ckpt={}", actt.to_str().unwrap()),
        "--set",
        "compare.steps=12",
        "--set",
        "adapters.m=2",
    ]);
    let trace = read(&rc, "trace_discrete.csv");
    assert_eq!(trace.lines().count(), 1 + 12);
    let stats = read(&rc, "stats.csv");
    let discrete_line = stats.lines().find(|l| l.starts_with("discrete")).unwrap();
    let jump: f64 = discrete_line.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(jump, 1.0);
    let soft_line = stats.lines().find(|l| l.starts_with("soft")).unwrap();
    let soft_jump: f64 = soft_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!(soft_jump < 1.0);
    // heatmap has rows x steps cells (m rows) plus legend swatches + bg
    let svg = read(&rc, "discrete_alpha.svg");
    let m = 3; // checkpoint carries 3 experts; config m applies to fresh models only
    assert_eq!(svg.matches("<rect").count(), m * 12 + 21 + 1);

    // ablation grid: 2 x 2 cross-product = 4 rows
    let ab = base.join("ab");
    run_ok(&[
        "ablate",
        "--out",
        ab.to_str().unwrap(),
        "--set",
        &format!("train.base_ckpt={ckpt_s}"),
        "--set",
        "ablate.bands=2,3",
        "--set",
        "ablate.lambda_f=0,0.1",
        "--set",
        "ablate.steps=4",
        "--set",
        "data.train_count=8",
        "--set",
        "data.val_count=4",
    ]);
    let summary = read(&ab, "summary.csv");
    assert_eq!(summary.lines().count(), 1 + 4);
    assert_eq!(
        summary.lines().next().unwrap(),
        "bands,m,lambda_f,routing,seed,initial_val_loss,final_val_loss"
    );
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn thread_cap_does_not_change_outputs() {
    let d1 = tmp("th1");
    let d2 = tmp("th2");
    let args = [
        "train",
        "--set",
        "train.mode=pretrain",
        "--set",
        "train.steps=6",
        "--set",
        "data.train_count=8",
        "--set",
        "data.val_count=4",
    ];
    let out = fera()
        .args(args)
        .args(["--out", d1.to_str().unwrap()])
        .env("FERA_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = fera()
        .args(args)
        .args(["--out", d2.to_str().unwrap()])
        .env("FERA_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&d1, "train.csv"), read(&d2, "train.csv"));
    assert_eq!(
        std::fs::read(d1.join("model.ckpt")).unwrap(),
        std::fs::read(d2.join("model.ckpt")).unwrap()
    );
    std::fs::remove_dir_all(&d1).ok();
    std::fs::remove_dir_all(&d2).ok();
}

#[test]
fn gradcheck_succeeds() {
    let d = tmp("gc");
    let out = run_ok(&["gradcheck", "--out", d.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
    let csv = read(&d, "gradcheck.csv");
    assert_eq!(csv.lines().count(), 1 + 7);
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn resolved_config_echo_is_reparseable_and_stable() {
    let d = tmp("echo");
    run_ok(&[
        "analyze",
        "--out",
        d.to_str().unwrap(),
        "--set",
        "schedule.t=20",
        "--set",
        "field.size=16",
    ]);
    let echo = read(&d, "config.resolved.ini");
    assert!(echo.contains("t = 20"));
    assert!(echo.contains("size = 16"));
    // feeding the echo back reproduces identical outputs
    let d2 = tmp("echo2");
    let cfg_path = d.join("config.resolved.ini");
    run_ok(&[
        "analyze",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
    ]);
    assert_eq!(read(&d, "evolution.csv"), read(&d2, "evolution.csv"));
    std::fs::remove_dir_all(&d).ok();
    std::fs::remove_dir_all(&d2).ok();
}
