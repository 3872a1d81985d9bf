use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chainlab"));
    c.env_remove("CHAINLAB_THREADS");
    c
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_BITCOIN: &str = r#"
protocol = "bitcoin"
model = "sync"
trials = 1
suites = ["implications"]
[params]
n = 20
t = 5
q = 0.1
horizon = 400
seed = 11
[adversary]
kind = "private_fork"
k = 3
[outputs]
records = true
"#;

const SMALL_PRISM: &str = r#"
protocol = "prism"
model = "sync"
trials = 2
suites = ["implications"]
[params]
n = 20
t = 5
q = 0.1
m = 3
horizon = 300
seed = 5
[adversary]
kind = "leader_censor"
[outputs]
records = true
"#;

#[test]
fn bounds_table_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = root().join("configs/bounds_table.toml");
    let out = run(&["bounds", "-c", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = std::fs::read(tmp.path().join("bounds.csv")).unwrap();
    let want = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/bounds.csv")).unwrap();
    assert!(got == want, "bounds.csv differs from the golden table");
}

fn records_with(cfg: &str, threads: &str) -> Vec<(String, Vec<u8>)> {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "-c", cfg, "--threads", threads, "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(tmp.path().join("records"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files.push(("implications.json".into(), std::fs::read(tmp.path().join("implications.json")).unwrap()));
    files
}

#[test]
fn records_are_reproducible_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("b.toml", SMALL_BITCOIN), ("p.toml", SMALL_PRISM)] {
        let cfg = write_config(tmp.path(), name, text);
        let a = records_with(&cfg, "1");
        let b = records_with(&cfg, "1");
        let c = records_with(&cfg, "3");
        assert!(a.len() >= 2);
        assert!(a == b, "{name}: two runs differ");
        assert!(a == c, "{name}: thread count changes output");
    }
}

#[test]
fn unknown_config_key_fails_closed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &SMALL_BITCOIN.replace("horizon = 400", "horizon = 400\nhorizn = 3"));
    let out = run(&["simulate", "-c", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizn"));
}

#[test]
fn unsafe_override_warns_and_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_BITCOIN.replace("t = 5", "t = 12");
    let cfg = write_config(tmp.path(), "u.toml", &text);
    let dir = tmp.path().to_str().unwrap();
    let refused = run(&["simulate", "-c", &cfg, "--out", dir]);
    assert_eq!(refused.status.code(), Some(2));
    let out = run(&["simulate", "-c", &cfg, "--out", dir, "--unsafe-override"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: parameters are not admissible"));
}

#[test]
fn planted_fixture_exits_nonzero_with_fingerprint() {
    let out = run(&["verify", "--planted"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("VIOLATION fixture.common_prefix seed=0 trial=0"), "{stdout}");
}

#[test]
fn suite_selection_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", SMALL_BITCOIN);
    let out_dir = tmp.path().join("out");
    let out = run(&["verify", "-c", &cfg, "--suite", "bounds", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("bounds.csv").exists());
    assert!(!out_dir.join("implications.json").exists());
    assert!(!out_dir.join("records").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS eta(xi=1, q=1/6) = 1/1080"));
    assert!(stdout.contains("verify: clean"));
}

#[test]
fn clean_verify_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", SMALL_BITCOIN);
    let out = run(&["verify", "-c", &cfg, "--trials", "3", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
