use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "t_in = 3
t_out = 1
c_hid = 4
strides = 1,2
q = 4
layers = 1
d_h = 4
epochs = 2
batch = 2
";

fn qeno(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qeno"))
        .args(args)
        .current_dir(dir)
        .env("QENO_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = qeno(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(
        dir.path(),
        &[
            "gen",
            "--out",
            "data",
            "--seed",
            "3",
            "--sequences",
            "4",
            "--dims",
            "5x4x8x8",
        ],
    );
    dir
}

fn train_tiny(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--config", "tiny.cfg", "--checkpoint", "ck/model.qeno"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn gen_writes_one_file_per_sequence() {
    let dir = workspace();
    assert_eq!(fs::read_dir(dir.path().join("data")).unwrap().count(), 4);
}

#[test]
fn train_eval_predict_export_round() {
    let dir = workspace();
    let d = dir.path();
    train_tiny(d, &[]);
    assert!(d.join("ck/model.qeno").is_file());
    let history = fs::read_to_string(d.join("reports/history-none.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(fs::read_to_string(d.join("reports/params-none.txt"))
        .unwrap()
        .lines()
        .any(|l| l.starts_with("total")));

    let eval = ok(d, &["eval", "--checkpoint", "ck/model.qeno", "--data", "data"]);
    let csv = String::from_utf8(eval.stdout).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("qeno,")));
    assert!(csv.lines().any(|l| l.starts_with("persistence,")));

    ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "ck/model.qeno",
            "--data",
            "data",
            "--out",
            "fc",
        ],
    );
    assert!(d.join("fc/forecast_00000.cvt").is_file());

    ok(
        d,
        &[
            "export",
            "--what",
            "forecast",
            "--format",
            "pgm",
            "--checkpoint",
            "ck/model.qeno",
            "--data",
            "data",
            "--out",
            "ex",
        ],
    );
    let pgm = fs::read_dir(d.join("ex")).unwrap().next().unwrap().unwrap().path();
    let bytes = fs::read(pgm).unwrap();
    assert!(bytes.starts_with(b"P5 8 8 255\n"));
    assert_eq!(bytes.len(), "P5 8 8 255\n".len() + 64);

    ok(
        d,
        &[
            "export",
            "--what",
            "coherence",
            "--checkpoint",
            "ck/model.qeno",
            "--data",
            "data",
            "--out",
            "coh",
        ],
    );
    assert!(fs::read_dir(d.join("coh")).unwrap().count() > 0);
}

#[test]
fn ablation_all_writes_a_four_row_table() {
    let dir = workspace();
    let d = dir.path();
    train_tiny(d, &["--ablation", "all", "--epochs", "1"]);
    let table = fs::read_to_string(d.join("reports/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    for tag in ["none", "no-qemid", "no-qedecoder", "no-both"] {
        assert!(d.join(format!("ck/model-{tag}.qeno")).is_file(), "{tag}");
    }
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = workspace();
    let d = dir.path();
    train_tiny(d, &[]);
    train_tiny(d, &["--resume", "ck/model.qeno"]);
    let history = fs::read_to_string(d.join("reports/history-none.csv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    let run = || {
        train_tiny(d, &[]);
        let eval = ok(d, &["eval", "--checkpoint", "ck/model.qeno", "--data", "data"]);
        (
            fs::read(d.join("ck/model.qeno")).unwrap(),
            fs::read(d.join("reports/history-none.csv")).unwrap(),
            eval.stdout,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn exit_codes_classify_failures() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(
        qeno(d, &["eval", "--checkpoint", "missing.qeno", "--data", "data"])
            .status
            .code(),
        Some(2)
    );
    fs::write(d.join("bad.cfg"), "q = lots\n").unwrap();
    assert_eq!(qeno(d, &["train", "--config", "bad.cfg"]).status.code(), Some(2));
    assert_eq!(
        qeno(d, &["train", "--config", "tiny.cfg", "--ablation", "sideways"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(qeno(d, &["gen", "--dims", "5x4x8"]).status.code(), Some(2));

    fs::create_dir(d.join("junk")).unwrap();
    fs::write(d.join("junk/a.cvt"), b"not a volume").unwrap();
    assert_eq!(
        qeno(d, &["train", "--config", "tiny.cfg", "--data", "junk"])
            .status
            .code(),
        Some(3)
    );
    fs::write(d.join("fake.qeno"), b"QENO").unwrap();
    assert_eq!(
        qeno(d, &["eval", "--checkpoint", "fake.qeno", "--data", "data"])
            .status
            .code(),
        Some(3)
    );
}
