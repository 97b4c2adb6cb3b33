use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use coamd::motion_repr::Motion;

const TINY: &str = "\
data.num=120
ae.epochs=1
ae.width=8
ae.latent_dim=8
mar.epochs=1
mar.width=16
mar.embed_dim=16
gen.epochs=1
gen.width=16
gen.head_width=16
gen.ode_steps=4
gen.ar_steps=3
";

fn coamd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coamd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = coamd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny corpus and checkpoints shared by every test in this file.
struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.conf");
        std::fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("ckpt");
        let c = s(&config);
        ok(&["gen-data", "--config", c, "--seed", "3", "--out", s(&data), "--num", "120"]);
        ok(&["train-ae", "--config", c, "--seed", "3", "--out", s(&ckpt), "--data", s(&data)]);
        ok(&["train-mar", "--config", c, "--seed", "3", "--out", s(&ckpt), "--data", s(&data)]);
        ok(&["train-gen", "--config", c, "--seed", "3", "--out", s(&ckpt), "--data", s(&data), "--ckpt", s(&ckpt)]);
        Fixture {
            _dir: dir,
            config,
            data,
            ckpt,
        }
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run.log")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    ok(&["gen-data", "--config", s(&f.config), "--seed", "3", "--out", s(&again), "--num", "120"]);
    let (a, b) = (dir_bytes(&f.data), dir_bytes(&again));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = coamd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    std::fs::write(&bad, "ae.epochs 3\n").unwrap();
    let out = coamd(&["gen-data", "--config", s(&bad), "--seed", "1", "--out", s(&tmp.path().join("o")), "--num", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed config"));

    std::fs::write(&bad, "ae.nonsense=3\n").unwrap();
    let out = coamd(&["gen-data", "--config", s(&bad), "--seed", "1", "--out", s(&tmp.path().join("o")), "--num", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ae.nonsense"));
}

#[test]
fn missing_and_mislabeled_checkpoints_are_distinct_errors() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let args = |ckpt: &Path| {
        coamd(&[
            "generate", "--config", s(&f.config), "--seed", "1", "--out", s(&tmp.path().join("o")),
            "--ckpt", s(ckpt), "--text", "a person walks", "--length", "32",
        ])
    };
    let missing = args(&empty);
    assert_eq!(missing.status.code(), Some(1));
    let missing = String::from_utf8_lossy(&missing.stderr).into_owned();
    assert!(missing.contains("missing checkpoint"), "{missing}");

    let wrong = tmp.path().join("wrong");
    std::fs::create_dir(&wrong).unwrap();
    for name in ["ae.ckpt", "mar.ckpt"] {
        std::fs::copy(f.ckpt.join(name), wrong.join(name)).unwrap();
    }
    std::fs::copy(f.ckpt.join("ae.ckpt"), wrong.join("gen.ckpt")).unwrap();
    let wrong = args(&wrong);
    assert_eq!(wrong.status.code(), Some(1));
    let wrong = String::from_utf8_lossy(&wrong.stderr).into_owned();
    assert!(wrong.contains("module=ae") && wrong.contains("expected module=gen"), "{wrong}");
    assert!(!wrong.contains("missing checkpoint"));
}

#[test]
fn generate_respects_requested_length_and_exports() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    ok(&[
        "generate", "--config", s(&f.config), "--seed", "1", "--out", s(&out), "--ckpt", s(&f.ckpt),
        "--text", "a person jumps", "--length", "64",
    ]);
    let motion = Motion::load(out.join("generated.motion")).unwrap();
    assert_eq!(motion.frames(), 64);

    ok(&[
        "export-anim", "--config", s(&f.config), "--seed", "1", "--out", s(&out),
        "--input", s(&out.join("generated.motion")), "--panels", "4",
    ]);
    let svg = std::fs::read_to_string(out.join("generated.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
}

#[test]
fn edit_recognize_and_retrieve_write_outputs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let common = ["--config", s(&f.config), "--seed", "2", "--out", s(&out)];
    let input = std::fs::read_dir(&f.data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "motion"));
    let input = match input {
        Some(p) => p,
        None => {
            let gen_out = tmp.path().join("g");
            ok(&[
                "generate", "--config", s(&f.config), "--seed", "2", "--out", s(&gen_out), "--ckpt", s(&f.ckpt),
                "--text", "a person waves", "--length", "32",
            ]);
            gen_out.join("generated.motion")
        }
    };
    let mut edit = vec!["edit"];
    edit.extend(common);
    edit.extend(["--ckpt", s(&f.ckpt), "--input", s(&input), "--mode", "inpaint", "--text", "a person kicks"]);
    ok(&edit);
    let edited = Motion::load(out.join("edited.motion")).unwrap();
    assert_eq!(edited.frames(), Motion::load(&input).unwrap().frames());

    let mut rec = vec!["recognize"];
    rec.extend(common);
    rec.extend(["--ckpt", s(&f.ckpt), "--data", s(&f.data), "--input", s(&input), "--top", "3"]);
    let stdout = String::from_utf8(ok(&rec).stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.starts_with("rank=1 class="));

    let mut ret = vec!["retrieve"];
    ret.extend(common);
    ret.extend(["--ckpt", s(&f.ckpt), "--data", s(&f.data), "--text", "a person walks", "--top", "2"]);
    let stdout = String::from_utf8(ok(&ret).stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(out.join("retrieval.txt")).unwrap(), stdout);
}

#[test]
fn evaluate_without_recognizer_checkpoint_names_it() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt");
    std::fs::create_dir(&ckpt).unwrap();
    for name in ["ae.ckpt", "gen.ckpt", "vocab.txt"] {
        std::fs::copy(f.ckpt.join(name), ckpt.join(name)).unwrap();
    }
    let out = coamd(&[
        "evaluate", "--config", s(&f.config), "--seed", "1", "--out", s(&tmp.path().join("o")),
        "--ckpt", s(&ckpt), "--data", s(&f.data),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing checkpoint") && err.contains("mar.ckpt"), "{err}");
}
