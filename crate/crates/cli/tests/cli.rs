use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use skyprior::analyze::coadd_mean;
use skyprior::io;
use skyprior::net::relu;
use skyprior::ExposureStack;

const STANDARD_SEED0_STACK_SHA256: &str = "1fd6fe4ae8dbccb5109c8e5a67237a3e269eb4c6ed4d843ae9f54ae3705e9d72";

fn skyprior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyprior")).args(args).output().expect("spawn skyprior")
}

fn ok(args: &[&str]) -> Output {
    let out = skyprior(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--preset", "standard", "--seed", "0", "--out", p(dir)]);
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(skyprior(&["synth", "--preset", "standard"]).status.code(), Some(2));
    assert_eq!(skyprior(&["restore", "--in", "x.mfds"]).status.code(), Some(2));
    assert_eq!(skyprior(&["gradcheck", "--precision", "32"]).status.code(), Some(2));
}

#[test]
fn bad_magic_exits_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mfds");
    fs::write(&bad, b"XXXX not a stack file at all, just some bytes").unwrap();
    let out = skyprior(&["restore", "--in", p(&bad), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
    let missing = skyprior(&["coadd", "--in", p(&dir.path().join("nope.mfds")), "--out", p(dir.path())]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn synth_is_reproducible_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a);
    synth(&b);
    for f in ["stack.mfds", "truth.mfds", "truth_catalog.csv"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f}");
    }
    assert_eq!(sha(&a.join("stack.mfds")), STANDARD_SEED0_STACK_SHA256);
    let catalog = fs::read_to_string(a.join("truth_catalog.csv")).unwrap();
    assert_eq!(catalog.lines().count(), 26);
    assert!(a.join("manifest.json").exists());
}

#[test]
fn zero_iterations_with_identity_start_gives_rectified_coadd() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    synth(&syn);
    let out = dir.path().join("r");
    let stack_path = syn.join("stack.mfds");
    ok(&["restore", "--in", p(&stack_path), "--iters", "0", "--sigma-init", "0", "--out", p(&out)]);
    let latent: ndarray::Array2<f32> = io::read_stack_file(out.join("latent.mfds")).unwrap().image().unwrap();
    let (stack, _): (ExposureStack<f32>, _) = io::read_stack(&stack_path).unwrap();
    assert_eq!(latent, coadd_mean(&stack).mapv(relu));
    for f in ["psfs.mfds", "loss.csv", "latent.pgm", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn restore_replays_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    synth(&syn);
    let stack = syn.join("stack.mfds");
    let straight = dir.path().join("straight");
    ok(&["--threads", "2", "restore", "--in", p(&stack), "--iters", "20", "--out", p(&straight)]);
    let replayed = dir.path().join("replayed");
    let out = ok(&["replay", p(&straight.join("manifest.json")), "--out", p(&replayed)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay reproduced 4 outputs"));
    assert_eq!(sha(&straight.join("latent.mfds")), sha(&replayed.join("latent.mfds")));

    let half = dir.path().join("half");
    ok(&["--threads", "2", "restore", "--in", p(&stack), "--iters", "10", "--out", p(&half)]);
    let resumed = dir.path().join("resumed");
    let ckpt = half.join("checkpoint.mfck");
    ok(&["--threads", "2", "restore", "--in", p(&stack), "--resume", p(&ckpt), "--iters", "20", "--out", p(&resumed)]);
    assert_eq!(sha(&straight.join("latent.mfds")), sha(&resumed.join("latent.mfds")));
    assert_eq!(sha(&straight.join("loss.csv")), sha(&resumed.join("loss.csv")));
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    synth(&syn);
    let co = dir.path().join("co");
    ok(&["coadd", "--in", p(&syn.join("stack.mfds")), "--out", p(&co)]);
    ok(&["replay", p(&co.join("manifest.json"))]);
    fs::copy(syn.join("truth.mfds"), syn.join("stack.mfds")).unwrap();
    let out = skyprior(&["replay", p(&co.join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn metrics_and_export_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    synth(&syn);
    let report = dir.path().join("report.csv");
    let truth = syn.join("truth.mfds");
    ok(&["metrics", "--img", p(&truth), "--truth", p(&truth), "--catalog", p(&syn.join("truth_catalog.csv")), "--out", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("metric,value\npsnr_db,inf\n"), "{text}");
    assert!(text.contains("completeness,1\n"));
    assert!(dir.path().join("report.csv.manifest.json").exists());

    let pgm = dir.path().join("plane.pgm");
    ok(&["export", "--in", p(&syn.join("stack.mfds")), "--plane", "7", "--lo", "0", "--hi", "50", "--out", p(&pgm)]);
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n# lo=0.0 hi=50.0\n64 64\n65535\n"));
    let bad = skyprior(&["export", "--in", p(&truth), "--lo", "1", "--hi", "1", "--out", p(&pgm)]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_and_records_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seed", "3", "--precision", "64", "--instances", "2", "--out", p(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert!(dir.path().join("report.json").exists());
}
