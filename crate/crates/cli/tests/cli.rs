//! Exit codes and error lines of the `driftcal` binary.

use std::fs;
use std::process::{Command, Output};

fn driftcal(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_driftcal"));
    cmd.args(args).env_remove("DRIFTCAL_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    for args in [
        &["--help"][..],
        &["prepare", "--help"],
        &["run", "--help"],
        &["report", "--help"],
    ] {
        assert_eq!(driftcal(args, &[]).status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn bad_thread_count_is_a_config_error() {
    for value in ["0", "-1", "many"] {
        let o = driftcal(&["report", "--in", "."], &[("DRIFTCAL_THREADS", value)]);
        assert_eq!(o.status.code(), Some(2), "{value}");
        assert!(
            stderr(&o).starts_with("error[config]: DRIFTCAL_THREADS"),
            "{}",
            stderr(&o)
        );
    }
}

#[test]
fn config_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"corpus": {"synth": {}}, "output_dir": "o", "epochs": 3}"#).unwrap();
    let o = driftcal(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
    assert!(stderr(&o).starts_with("error[config]:"));

    let missing = dir.path().join("nope.json");
    let o = driftcal(&["run", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = driftcal(
        &["report", "--in", dir.path().to_str().unwrap(), "--format", "xml"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));

    let o = driftcal(&["prepare", "--synth", "--pattern", "weather", "--out", "x"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_corpus_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tsv");
    fs::write(&corpus, "only\tthree\tfields\n").unwrap();
    let out = dir.path().join("out");
    let o = driftcal(
        &[
            "prepare",
            "--corpus",
            corpus.to_str().unwrap(),
            "--pattern",
            "timeline",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("c.tsv"));
}

#[test]
fn prepare_run_report_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("synth.json"),
        r#"{"vocab_size": 40, "sequence_count": 600, "label_count": 4}"#,
    )
    .unwrap();
    let corpus = root.join("corpus");
    let o = driftcal(
        &[
            "prepare",
            "--synth",
            root.join("synth.json").to_str().unwrap(),
            "--skip-cosine",
            "--out",
            corpus.to_str().unwrap(),
        ],
        &[("DRIFTCAL_THREADS", "2")],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    fs::write(
        root.join("run.json"),
        r#"{"corpus": {"prepared": "corpus"}, "output_dir": "run",
            "model": {"hidden_dim": 8, "layer_count": 2, "epochs": 1},
            "methods": [{"method": "Base"}, {"method": "TS"}], "seeds": [3]}"#,
    )
    .unwrap();
    let o = driftcal(&["run", "--config", root.join("run.json").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = driftcal(
        &["report", "--in", root.join("run").to_str().unwrap(), "--format", "csv"],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("run/report.csv").is_file());
    assert!(root.join("run/overhead_report.csv").is_file());
}
