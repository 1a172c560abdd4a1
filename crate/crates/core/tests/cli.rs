//! Drives the `hif` binary against the fixtures shipped in `tests/fixtures`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hif_core::motion::{estimate_motion_field, stack_fields, Frame, SearchParams};
use hif_core::tensor::io;
use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn hif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hif"))
        .args(args)
        .env("HIF_THREADS", "1")
        .output()
        .expect("spawn hif")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn extract(dir: &str, out: &Path, extra: &[&str]) -> Output {
    let frames = fixture(dir);
    let mut args = vec!["extract-mv", path(&frames), "--out", path(out)];
    args.extend_from_slice(extra);
    hif(&args)
}

#[test]
fn identical_frames_give_a_zero_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mv.hift");
    ok(&extract("frames/identical", &out, &[]));
    let t = io::load_any(&out).unwrap().into_f32();
    assert_eq!(t.dims(), &[1, 4, 4, 2]);
    assert!(t.data().iter().all(|&v| v == 0.0));

    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mv.hift.json")).unwrap())
        .unwrap();
    assert_eq!(sidecar["search_range"], 8);
    assert_eq!(sidecar["method"], "exhaustive");
    assert_eq!(sidecar["dims"], serde_json::json!([1, 4, 4, 2]));
    for key in ["tie_break", "normalization", "cost", "sign"] {
        assert!(sidecar[key].is_string(), "sidecar lacks {key}");
    }
}

#[test]
fn shifted_pair_matches_the_exhaustive_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let prev = Frame::read_pnm(fixture("frames/shifted/000.pgm")).unwrap();
    let cur = Frame::read_pnm(fixture("frames/shifted/001.pgm")).unwrap();
    let field = estimate_motion_field(&prev, &cur, &SearchParams::exhaustive(8)).unwrap();
    let oracle = stack_fields::<f32>(std::slice::from_ref(&field), 4, 4, 8).unwrap();

    for method in ["exhaustive", "diamond"] {
        let out = dir.path().join(format!("{method}.hift"));
        ok(&extract("frames/shifted", &out, &["--method", method]));
        let t = io::load_any(&out).unwrap().into_f32();
        assert_eq!(t, oracle, "{method}");
    }

    // content moved by (3, -2): every block whose source lies inside the
    // previous frame carries exactly that vector
    for row in 0..3 {
        for col in 1..4 {
            let v = field.get(row, col);
            assert_eq!((v.dx, v.dy), (3, -2), "block ({row}, {col})");
            let i = (row * 4 + col) * 2;
            assert_eq!(&oracle.data()[i..i + 2], &[3.0 / 8.0, -2.0 / 8.0]);
        }
    }
}

#[test]
fn extraction_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mv.hift");
    let r = extract("frames/corrupt", &out, &[]);
    assert_eq!(r.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("001.pgm"), "{msg}");
    assert!(!out.exists());

    let empty = tempfile::tempdir().unwrap();
    let r = hif(&["extract-mv", path(empty.path()), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn smoke_training_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("smoke.json");
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let start = Instant::now();
    let r = hif(&["train", "--config", path(&cfg), "--seed", "11", "--deterministic", "--out", path(&a)]);
    let secs = start.elapsed().as_secs_f64();
    ok(&r);
    assert!(secs < 60.0, "smoke training took {secs:.1} s");

    let log = String::from_utf8(r.stdout).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,l_all,l_a,l_mv,wall_ms");
    assert_eq!(lines.len(), 201);
    assert!(lines[200].starts_with("200,"));

    ok(&hif(&["train", "--config", path(&cfg), "--seed", "11", "--deterministic", "--out", path(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let report = dir.path().join("eval.json");
    ok(&hif(&[
        "eval",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&a),
        "--trials",
        "20",
        "--out",
        path(&report),
    ]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["mode"], "expert_conditioned");
    assert_eq!(v["tasks"][0]["trials"], 20);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ckpt");
    let missing = dir.path().join("nope.json");
    let r = hif(&["train", "--config", path(&missing), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.json"));

    let r = hif(&["train", "--config", path(&fixture("invalid.json")), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("batch_szie"));

    let r = hif(&["train", "--mode", "sideways", "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn gradcheck_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let r = hif(&["gradcheck", "all", "--out", path(&report)]);
    ok(&r);
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("PASS")));
    assert!(!stderr.lines().any(|l| l.starts_with("FAIL")), "{stderr}");
    assert!(report.exists());

    let r = hif(&["gradcheck", "everything"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn hindsight_sweep_reports_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("sweep.json");
    ok(&hif(&[
        "sweep",
        "hindsight",
        "--config",
        path(&fixture("smoke.json")),
        "--steps",
        "0",
        "--trials",
        "4",
        "--h",
        "1,2,4,8,16",
        "--out",
        path(&report),
    ]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["sweep"], "hindsight");
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let hs: Vec<u64> = rows.iter().map(|r| r["h"].as_u64().unwrap()).collect();
    assert_eq!(hs, [1, 2, 4, 8, 16]);
    assert!(rows.iter().all(|r| r["backbone_tokens"] == rows[0]["backbone_tokens"]));
}

#[test]
fn untrained_checkpoint_scores_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("untrained.ckpt");
    let cfg = fixture("smoke.json");
    ok(&hif(&["train", "--config", path(&cfg), "--steps", "0", "--out", path(&ckpt)]));
    let r = hif(&[
        "eval",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&ckpt),
        "--task",
        "direction_memory",
        "--trials",
        "400",
    ]);
    ok(&r);
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    let rate = v["tasks"][0]["success_rate"].as_f64().unwrap();
    assert_eq!(v["tasks"][0]["trials"], 400);
    assert!((rate - 0.5).abs() <= 0.05, "untrained success {rate}");

    let r = hif(&["eval", "--checkpoint", path(&ckpt), "--mode", "none"]);
    assert_eq!(r.status.code(), Some(2));
}
