use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn styletts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styletts"))
        .args(args)
        .env_remove("STYLE_TTS_SEED")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    styletts(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn trained(dir: &Path) {
    assert_eq!(code(&["gen-corpus", "--out", p(&dir.join("c")), "--n", "5", "--seed", "1"]), 0);
    let out = styletts(&[
        "train", "--corpus", p(&dir.join("c")), "--scale", "miniature", "--steps", "2", "--out",
        p(&dir.join("run")), "--batch-size", "2", "--log-every", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["synth", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen-corpus", "--out", p(dir.path()), "--n", "0"]), 1);
    assert_eq!(
        code(&["style", "setdim", "--zeros", "4", "--dim", "4", "--value", "1", "--out", p(&dir.path().join("z"))]),
        1
    );
    assert_eq!(
        code(&["style", "setdim", "--zeros", "4", "--dim", "0", "--value", "1", "--out", p(&dir.path().join("z"))]),
        0
    );
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    assert_eq!(code(&["diag", "--history", p(&missing)]), 2);
    assert_eq!(code(&["infer", "--ckpt", p(&missing), "--ref", p(&missing), "--out", p(&missing)]), 2);
    fs::write(dir.path().join("empty.tsv"), "").unwrap();
    assert_eq!(code(&["diag", "--history", p(&dir.path().join("empty.tsv"))]), 2);
    fs::write(dir.path().join("bad.txt"), "0.5\nnot a number\n").unwrap();
    let bad = p(&dir.path().join("bad.txt")).to_string();
    assert_eq!(code(&["style", "combine", "--a", &bad, "--b", &bad, "--out", p(&missing)]), 2);
}

#[test]
fn train_synth_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let ckpt = d.join("run/ckpt_2");
    assert!(ckpt.is_dir());
    let diag = styletts(&["diag", "--history", p(&d.join("run/history.tsv"))]);
    assert!(diag.status.success());
    assert!(String::from_utf8_lossy(&diag.stdout).contains("post_ramp_mean_kl"));

    assert_eq!(code(&["infer", "--ckpt", p(&ckpt), "--ref", p(&d.join("c/utt00000.mel")), "--out", p(&d.join("z.txt"))]), 0);
    let z = fs::read_to_string(d.join("z.txt")).unwrap();
    assert_eq!(z.lines().count(), 4);

    let syn = d.join("syn");
    let synth = |extra: &[&str], id: &str| {
        let mut args = vec!["synth", "--ckpt", p(&ckpt), "--text", "ab", "--out", p(&syn), "--id", id, "--max-frames", "6"];
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(synth(&["--z", p(&d.join("z.txt"))], "a"), 0);
    assert_eq!(synth(&["--prior-seed", "3"], "b"), 0);
    for f in ["a.mel", "a.pgm", "a.z", "b.mel", "stats.tsv"] {
        assert!(d.join("syn").join(f).is_file(), "{f}");
    }
    let stats = fs::read_to_string(d.join("syn/stats.tsv")).unwrap();
    assert_eq!(stats.lines().count(), 3);
    assert_eq!(synth(&[], "c"), 1);
    assert_eq!(synth(&["--z", p(&d.join("z.txt")), "--prior-seed", "3"], "c"), 1);

    // A vector of the wrong length is a format error.
    fs::write(d.join("short.txt"), "0.1\n").unwrap();
    assert_eq!(synth(&["--z", p(&d.join("short.txt"))], "d"), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c, full_out, half_out) = (d.join("c"), d.join("full"), d.join("half"));
    assert_eq!(code(&["gen-corpus", "--out", p(&c), "--n", "5", "--seed", "2"]), 0);
    let base = ["--scale", "miniature", "--batch-size", "2", "--log-every", "0", "--seed", "9"];
    let mut full = vec!["train", "--corpus", p(&c), "--steps", "4", "--out", p(&full_out)];
    full.extend_from_slice(&base);
    assert_eq!(code(&full), 0);
    let mut half = vec!["train", "--corpus", p(&c), "--steps", "2", "--out", p(&half_out)];
    half.extend_from_slice(&base);
    assert_eq!(code(&half), 0);
    let from = half_out.join("ckpt_2");
    let resume = [
        "train", "--corpus", p(&c), "--steps", "4", "--out", p(&half_out), "--resume", p(&from), "--log-every", "0",
    ];
    assert_eq!(code(&resume), 0);
    for f in ["params.vstp", "adam_m.vstp", "adam_v.vstp"] {
        let a = fs::read(d.join("full/ckpt_4").join(f));
        let b = fs::read(d.join("half/ckpt_4").join(f));
        assert!(a.is_ok(), "{f}");
        assert_eq!(a.unwrap(), b.unwrap(), "{f}");
    }
    assert_eq!(
        fs::read(d.join("full/history.tsv")).unwrap(),
        fs::read(d.join("half/history.tsv")).unwrap()
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |out: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_styletts"));
        c.args(["gen-corpus", "--out", p(&d.join(out)), "--n", "2"]).env_remove("STYLE_TTS_SEED");
        if let Some(v) = env {
            c.env("STYLE_TTS_SEED", v);
        }
        c.output().unwrap().status.code().unwrap()
    };
    assert_eq!(gen("e", Some("7")), 0);
    assert_eq!(code(&["gen-corpus", "--out", p(&d.join("f")), "--n", "2", "--seed", "7"]), 0);
    assert_eq!(fs::read(d.join("e/utt00001.mel")).unwrap(), fs::read(d.join("f/utt00001.mel")).unwrap());
    assert_eq!(gen("g", Some("x")), 1);
}
