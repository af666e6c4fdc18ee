use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lora-rffi");

const SMALL: &str = r#"
seed = 5
[radio]
n_preambles = 2
[devices]
count = 3
[capture]
sessions = 2
packets_per_session = 12
[train]
train_count = 6
[optimizer]
epochs = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    fs::write(path.join("exp.toml"), config).unwrap();
    (dir, path)
}

fn without_header(text: &str) -> String {
    text.lines().skip(1).collect::<Vec<_>>().join("\n")
}

#[test]
fn generate_is_deterministic_and_guards_output() {
    let (_tmp, dir) = workspace(SMALL);
    let msg = ok(&dir, &["generate", "--config", "exp.toml", "--out", "a.lrfd"]);
    assert!(msg.contains("3 devices") && msg.contains("72 packets"), "{msg}");
    ok(&dir, &["generate", "--config", "exp.toml", "--out", "b.lrfd"]);
    assert_eq!(fs::read(dir.join("a.lrfd")).unwrap(), fs::read(dir.join("b.lrfd")).unwrap());

    let err = fails(&dir, &["generate", "--config", "exp.toml", "--out", "a.lrfd"]);
    assert!(err.contains("--force"), "{err}");
    ok(&dir, &["generate", "--config", "exp.toml", "--out", "a.lrfd", "--force", "--seed", "6"]);
    assert_ne!(fs::read(dir.join("a.lrfd")).unwrap(), fs::read(dir.join("b.lrfd")).unwrap());
}

#[test]
fn invalid_config_names_the_field() {
    let (_tmp, dir) = workspace("[capture]\npackets_per_session = 0\n");
    let err = fails(&dir, &["generate", "--config", "exp.toml"]);
    assert!(err.contains("capture.packets_per_session"), "{err}");
    fs::write(dir.join("exp.toml"), "[devices]\ncount = 1\n").unwrap();
    let err = fails(&dir, &["generate", "--config", "exp.toml"]);
    assert!(err.contains("devices.count"), "{err}");
}

#[test]
fn train_eval_round_trip_is_reproducible() {
    let (_tmp, dir) = workspace(SMALL);
    ok(&dir, &["generate", "--config", "exp.toml", "--out", "d.lrfd"]);
    for (ckpt, report) in [("m1.lrfc", "r1"), ("m2.lrfc", "r2")] {
        ok(&dir, &["train", "--config", "exp.toml", "--dataset", "d.lrfd", "--out", ckpt]);
        let msg = ok(&dir, &["eval", "--checkpoint", ckpt, "--dataset", "d.lrfd", "--out", report]);
        assert!(msg.contains("18 packets"), "{msg}");
    }
    assert_eq!(fs::read(dir.join("m1.lrfc")).unwrap(), fs::read(dir.join("m2.lrfc")).unwrap());
    for ext in ["txt", "csv"] {
        let a = fs::read_to_string(dir.join(format!("r1.{ext}"))).unwrap();
        let b = fs::read_to_string(dir.join(format!("r2.{ext}"))).unwrap();
        assert_eq!(without_header(&a), without_header(&b));
    }
    let text = fs::read_to_string(dir.join("r1.txt")).unwrap();
    assert!(text.contains("test selection: sessions [1] packets 6..end"), "{text}");

    // cross-session selection, cnn-only with the gate disabled
    let out = ok(
        &dir,
        &[
            "eval",
            "--checkpoint",
            "m1.lrfc",
            "--dataset",
            "d.lrfd",
            "--test-sessions",
            "2",
            "--classifier",
            "cnn",
            "--lambda",
            "inf",
        ],
    );
    assert!(out.contains("test packets: 36"), "{out}");
    assert!(out.contains("lambda: inf Hz"), "{out}");
}

#[test]
fn eval_guards() {
    let (_tmp, dir) = workspace(SMALL);
    ok(&dir, &["generate", "--config", "exp.toml", "--out", "d.lrfd"]);
    ok(&dir, &["train", "--config", "exp.toml", "--dataset", "d.lrfd", "--no-compensate", "--out", "m.lrfc"]);
    let base = ["eval", "--checkpoint", "m.lrfc", "--dataset", "d.lrfd"];

    let err = fails(&dir, &[&base[..], &["--compensate"]].concat());
    assert!(err.contains("compensation mode mismatch"), "{err}");
    let err = fails(&dir, &[&base[..], &["--start", "0"]].concat());
    assert!(err.contains("overlaps"), "{err}");
    ok(&dir, &[&base[..], &["--start", "0", "--allow-overlap", "--no-compensate"]].concat());

    let err = fails(&dir, &[&base[..], &["--lambda=-3"]].concat());
    assert!(err.contains("lambda"), "{err}");

    // a dataset with devices the checkpoint never saw
    fs::write(dir.join("other.toml"), SMALL.replace("count = 3", "count = 4")).unwrap();
    ok(&dir, &["generate", "--config", "other.toml", "--out", "other.lrfd"]);
    let err = fails(&dir, &["eval", "--checkpoint", "m.lrfc", "--dataset", "other.lrfd"]);
    assert!(err.contains("unknown to the checkpoint"), "{err}");
}

#[test]
fn cfo_report_writes_series_and_session_tables() {
    let (_tmp, dir) = workspace(SMALL);
    ok(&dir, &["generate", "--config", "exp.toml", "--out", "d.lrfd"]);
    let summary = ok(&dir, &["cfo-report", "--dataset", "d.lrfd", "--out", "cfo"]);
    assert!(summary.contains("packets: 72"), "{summary}");
    let series = fs::read_to_string(dir.join("cfo_series.csv")).unwrap();
    assert_eq!(series.lines().count(), 73);
    let sessions = fs::read_to_string(dir.join("cfo_sessions.csv")).unwrap();
    assert_eq!(sessions.lines().count(), 1 + 3 * 2);
    let err = fails(&dir, &["cfo-report", "--dataset", "d.lrfd", "--out", "cfo"]);
    assert!(err.contains("--force"), "{err}");
}

#[test]
fn missing_dataset_reports_the_path() {
    let (_tmp, dir) = workspace(SMALL);
    let err = fails(&dir, &["cfo-report", "--dataset", "nowhere.lrfd"]);
    assert!(err.contains("nowhere.lrfd"), "{err}");
}
