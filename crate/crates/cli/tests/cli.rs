use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dlspeed::container;
use dlspeed::sampling::acceleration_factor;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlspeed"))
        .args(args)
        .env_remove("MRVX_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn achieved(stdout: &str) -> f64 {
    stdout.trim().strip_prefix("achieved R: ").unwrap().parse().unwrap()
}

#[test]
fn mask_command() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mrvx"), dir.path().join("b.mrvx"));
    let base = ["mask", "--shape", "64x64", "--accel", "10", "--center", "12x12", "--seed", "3"];
    let r = achieved(&ok(&[&base[..], &["--out", p(&a)]].concat()));
    assert!((9.5..=10.5).contains(&r), "R = {r}");
    ok(&[&base[..], &["--out", p(&b)]].concat());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = container::decode_mask(&fs::read(&a).unwrap()).unwrap();
    assert!((acceleration_factor(&m) - r).abs() <= 5e-5);

    let full = dir.path().join("full.mrvx");
    let pbm = dir.path().join("full.pbm");
    let out = ok(&[
        "mask", "--shape", "16x16", "--accel", "1", "--center", "16x16", "--out", p(&full), "--pbm", p(&pbm),
    ]);
    assert_eq!(achieved(&out), 1.0);
    assert!(fs::read_to_string(&pbm).unwrap().starts_with("P1\n16 16\n"));
}

fn simulate(dir: &Path, extra: &[&str]) {
    ok(&[
        &["simulate", "--cases", "3", "--shape", "32x32", "--coils", "4", "--center", "8x8", "--seed", "11"][..],
        extra,
        &["--out-dir", p(dir)],
    ]
    .concat());
}

#[test]
fn simulate_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a, &["--accel", "4"]);
    simulate(&b, &["--accel", "4", "--jobs", "2"]);

    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let cases = manifest["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 3);
    for c in cases {
        let id = c["id"].as_str().unwrap();
        assert!(c["seeds"]["mask"].is_u64());
        for f in ["manifest.json"].iter().map(|s| a.join(s)).chain(
            ["image.mrvx", "maps.mrvx", "kspace.mrvx", "mask.mrvx"].iter().map(|f| a.join(id).join(f)),
        ) {
            let rel = f.strip_prefix(&a).unwrap();
            assert_eq!(fs::read(&f).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
        }
        let m = container::decode_mask(&fs::read(a.join(id).join("mask.mrvx")).unwrap()).unwrap();
        let recount = m.shape().iter().product::<usize>() as f64 / m.count() as f64;
        assert_eq!(c["achieved_r"].as_f64().unwrap(), recount);
    }
}

#[test]
fn recon_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    simulate(&corpus, &["--accel", "1", "--noise", "0"]);
    let case = corpus.join("case_0000");
    let img = dir.path().join("zero.mrvx");
    let pgm = dir.path().join("zero.pgm");
    ok(&[
        "recon", "--method", "zero",
        "--kspace", p(&case.join("kspace.mrvx")),
        "--maps", p(&case.join("maps.mrvx")),
        "--mask", p(&case.join("mask.mrvx")),
        "--out", p(&img), "--pgm", p(&pgm),
    ]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), b"P5\n32 32\n255\n".len() + 32 * 32);

    // full mask, no noise: only the f32 storage of the inputs separates recon from truth
    let report: Value = serde_json::from_str(&ok(&[
        "eval", "--recon", p(&img), "--reference", p(&case.join("image.mrvx")),
        "--mask", p(&case.join("mask.mrvx")), "--method", "zero_filled",
    ]))
    .unwrap();
    assert!(report["nmse"].as_f64().unwrap() < 1e-8);
    assert_eq!(report["achieved_r"].as_f64(), Some(1.0));

    let same: Value = serde_json::from_str(&ok(&[
        "eval", "--recon", p(&img), "--reference", p(&img),
    ]))
    .unwrap();
    assert_eq!(same["nmse"].as_f64(), Some(0.0));
    assert!((same["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let r1 = dir.path().join("r1.json");
    fs::write(&r1, serde_json::to_vec(&same).unwrap()).unwrap();
    let agg: Value = serde_json::from_str(&ok(&["eval", "--aggregate", p(&r1), p(&r1), p(&r1)])).unwrap();
    assert_eq!(agg["aggregate"][0]["n"].as_u64(), Some(3));
    assert_eq!(agg["aggregate"][0]["nmse"]["std"].as_f64(), Some(0.0));

    // corpus mode with a worker pool
    let out = dir.path().join("cs");
    ok(&[
        "recon", "--method", "cs", "--cs-iters", "20", "--corpus", p(&corpus), "--out-dir", p(&out), "--jobs", "2",
    ]);
    let summary: Value = serde_json::from_str(&ok(&[
        "eval", "--corpus", p(&corpus), "--recon-dir", p(&out), "--jobs", "2",
    ]))
    .unwrap();
    let reports = summary["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r["method"] == "cs_tv" && r["wall_time_s"].is_f64()));
    assert_eq!(summary["aggregate"][0]["n"].as_u64(), Some(3));
}

#[test]
fn train_then_recon_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    simulate(&corpus, &["--accel", "4"]);
    let ck = dir.path().join("ck");
    let args = ["train", "--corpus", p(&corpus), "--preset", "desk", "--seed", "5", "--val-cases", "1"];
    ok(&[&args[..], &["--epochs", "1", "--out-checkpoint", p(&ck)]].concat());
    for f in ["best.mrvx", "last.mrvx", "train_log.jsonl"] {
        assert!(ck.join(f).exists(), "{f}");
    }

    // an absurd learning rate blows up: numeric failure, last good weights kept
    let bad = dir.path().join("bad");
    let out = run(&[&args[..], &["--epochs", "3", "--lr", "1e30", "--out-checkpoint", p(&bad)]].concat());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let last = fs::read(bad.join("last.mrvx")).unwrap();
    let (_, w) = dlspeed::net::DLSpeedWeights::from_container(&last).unwrap();
    assert!(w.flatten().iter().all(|v| v.is_finite()));
    let case = corpus.join("case_0002");
    let img = dir.path().join("dl.mrvx");
    ok(&[
        "recon", "--method", "dlspeed", "--checkpoint", p(&ck.join("best.mrvx")),
        "--kspace", p(&case.join("kspace.mrvx")),
        "--maps", p(&case.join("maps.mrvx")),
        "--mask", p(&case.join("mask.mrvx")),
        "--out", p(&img),
    ]);
    let x = container::decode_image(&fs::read(&img).unwrap()).unwrap();
    assert_eq!(x.shape(), &[32, 32]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["mask", "--shape", "64x64"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let m = dir.path().join("m.mrvx");
    ok(&["mask", "--shape", "16x16", "--accel", "2", "--center", "4x4", "--out", p(&m)]);
    let out = run(&[
        "recon", "--method", "dlspeed", "--kspace", p(&m), "--maps", p(&m), "--mask", p(&m), "--out", p(&m),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));

    let junk = dir.path().join("junk.mrvx");
    fs::write(&junk, b"definitely not a container").unwrap();
    assert_eq!(run(&["eval", "--recon", p(&junk), "--reference", p(&junk)]).status.code(), Some(2));
    let missing = dir.path().join("missing.mrvx");
    assert_eq!(run(&["eval", "--recon", p(&missing), "--reference", p(&junk)]).status.code(), Some(2));
    // infeasible target
    assert_eq!(
        run(&["mask", "--shape", "16x16", "--accel", "20", "--center", "8x8", "--out", p(&m)]).status.code(),
        Some(2)
    );
}
