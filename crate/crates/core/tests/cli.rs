use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bcilink"));
    c.env_remove("BCILINK_OUT_DIR");
    c
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn text(o: &[u8]) -> String {
    String::from_utf8_lossy(o).into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = repo("configs/default.toml");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("ok trials=80"));
    for f in ["transcript.jsonl", "report.txt", "report.kv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let kv = std::fs::read_to_string(dir.path().join("report.kv")).unwrap();
    assert!(kv.contains("seed=9"));

    let t = dir.path().join("transcript.jsonl");
    let o = run(&["replay", t.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).trim(), "ok trials=80 identical=true");

    let tampered = std::fs::read_to_string(&t).unwrap().replacen("\"started_at_ms\":0", "\"started_at_ms\":1", 1);
    std::fs::write(&t, tampered).unwrap();
    let o = run(&["replay", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).starts_with("error kind=replay_mismatch line=2"));
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["run", "--seed", "4", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("transcript.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn sweep_writes_cells_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--axis", "snr_db", "--values", "-10,10", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep_snr_db/sweep.tsv")).unwrap();
    let rows: Vec<_> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("axis\tvalue"));
    for i in 0..2 {
        assert!(dir.path().join(format!("sweep_snr_db/cell_{i:03}.kv")).exists());
        assert!(dir.path().join(format!("sweep_snr_db/cell_{i:03}.jsonl")).exists());
    }
    let leftovers = std::fs::read_dir(dir.path().join("sweep_snr_db"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".tmp"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn export_epochs_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["export-epochs", "--count", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("epochs/epoch_0002.csv")).unwrap();
    assert!(csv.starts_with("#meta attended_index="));
    assert_eq!(csv.lines().count(), 2 + 500);
}

#[test]
fn env_var_sets_output_dir_and_flag_wins() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["export-epochs", "--count", "1"])
        .env("BCILINK_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.path().join("epochs/epoch_0000.csv").exists());
    let o = bin()
        .args(["export-epochs", "--count", "1", "--out", flag_dir.path().to_str().unwrap()])
        .env("BCILINK_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.path().join("epochs/epoch_0000.csv").exists());
}

#[test]
fn config_errors_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("command_table = [\"Halt\", \"MoveEast\"]\n", "command_table"),
        ("[schedule]\nrepeats = 0\n", "schedule.repeats"),
        ("fs_hz = 100.0\n", "fs_hz"),
        ("[noise]\nsnr_db = \"loud\"\n", "noise.snr_db"),
        ("bogus = 1\n", "bogus"),
    ];
    for (i, (body, field)) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&p, body).unwrap();
        let o = run(&["run", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        let err = text(&o.stderr);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error kind=config field={field} message=\"")), "{err}");
    }
    let o = run(&["sweep", "--axis", "loudness", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["export-epochs", "--count", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.jsonl");
    std::fs::write(&p, "not a transcript\n").unwrap();
    let o = run(&["replay", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).starts_with("error kind=runtime"));
    let o = run(&["replay", dir.path().join("missing.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn demo_runs_scripted_console() {
    let o = run(&["demo", "--bind", "127.0.0.1:0", "--trials", "5"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let s = text(&o.stdout);
    assert!(s.lines().next().unwrap().starts_with("gateway listening on 127.0.0.1:"));
    assert_eq!(s.lines().filter(|l| l.starts_with("trial=")).count(), 5);
    assert!(s.lines().last().unwrap().starts_with("ok trials=5"));
}
