use std::fs;
use std::process::{Command, Output};

fn flash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flash")).args(args).output().expect("spawn flash")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_both_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = flash(&["run", "--topology", "ws:20,4,0.3", "--txns", "200", "--reps", "2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(runs.starts_with("axis,value,router,rep,seed,"));
    // header plus 3 routers x 2 reps
    assert_eq!(runs.lines().count(), 7);
    assert!(dir.path().join("run_summary.csv").exists());
    let text = stdout(&o);
    for r in ["flash", "sp", "spider"] {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().nth(1) == Some(r)).count(), 1, "{text}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = flash(&["run", "--topology", "ws:16,4,0.2", "--txns", "150", "--reps", "2", "--seed", "9", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["run.csv", "run_summary.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_keys_rows_by_axis_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = flash(&[
        "sweep", "--axis", "m", "--values", "0,2", "--router", "flash", "--topology", "ws:16,4,0.3", "--txns", "100",
        "--reps", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep_m.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0", "2"]);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("m,")));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        &["run", "--reps", "0", "--out", out][..],
        &["run", "--fund", "500,100", "--txns", "10", "--out", out],
        &["run", "--k", "0", "--txns", "10", "--out", out],
        &["run", "--router", "lightning", "--out", out],
        &["run", "--topology", "grid:5", "--out", out],
        &["sweep", "--axis", "q", "--values", "abc", "--txns", "10", "--out", out],
        &["sweep", "--axis", "colour", "--values", "1", "--out", out],
    ] {
        let o = flash(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "no partial output");
}

#[test]
fn oracle_suites_pass() {
    for check in ["maxflow", "lp", "yen"] {
        let o = flash(&["oracle", "--check", check, "--cases", "40"]);
        assert!(o.status.success(), "{check}: {}", stdout(&o));
        assert!(stdout(&o).contains("0 failures"));
    }
}

#[test]
fn stats_on_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let mut body = String::from("sender,receiver,volume,timestamp\n");
    for i in 0..40u64 {
        body.push_str(&format!("a{},b{},{},{}\n", i % 3, i % 5, (i + 1) * 10, i * 3600));
    }
    fs::write(&path, body).unwrap();
    let o = flash(&["stats", "--trace", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("records                    40"), "{text}");
    assert!(text.contains("median volume              205.00"), "{text}");
}

#[test]
fn stats_reports_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "from,to\nx,y\n").unwrap();
    assert_eq!(flash(&["stats", "--trace", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(flash(&["stats", "--trace", "/definitely/missing.csv"]).status.code(), Some(1));
}
