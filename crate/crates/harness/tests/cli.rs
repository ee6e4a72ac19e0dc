use std::path::Path;
use std::process::{Command, Output};

use nvtree_harness::vecfile::{read_vectors, write_vectors};
use serde_json::Value;

fn nvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvt"))
        .args(args)
        .env_remove("NVTREE_FAULT")
        .output()
        .expect("nvt runs")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = nvt(args);
    assert!(
        out.status.success(),
        "nvt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_then_query_finds_the_indexed_vector_first() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.fvecs");
    let idx = dir.path().join("idx");
    ok(&[
        "gen",
        "--output",
        s(&data),
        "--n",
        "20000",
        "--dim",
        "16",
        "--seed",
        "3",
    ]);
    ok(&[
        "build",
        "--data-dir",
        s(&idx),
        "--input",
        s(&data),
        "--seed",
        "5",
    ]);
    let all = read_vectors(&data).unwrap();
    let q = dir.path().join("q.fvecs");
    write_vectors(&q, &[all[1234].clone(), all[17].clone()]).unwrap();
    let lines = ok(&["query", "--data-dir", s(&idx), "--input", s(&q), "-k", "10"]);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["ids"][0], 1234);
    assert_eq!(lines[1]["ids"][0], 17);
}

#[test]
fn insert_media_then_media_query_votes_for_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.fvecs");
    let idx = dir.path().join("idx");
    ok(&[
        "gen",
        "--output",
        s(&data),
        "--n",
        "3000",
        "--dim",
        "8",
        "--seed",
        "1",
    ]);
    let lines = ok(&[
        "insert",
        "--data-dir",
        s(&idx),
        "--input",
        s(&data),
        "--batch",
        "1000",
        "--media-from",
        "40",
    ]);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["media"], 42);
    assert_eq!(lines[2]["first_id"], 2000);
    let all = read_vectors(&data).unwrap();
    let q = dir.path().join("q.fvecs");
    write_vectors(&q, &all[1000..1100]).unwrap();
    let votes = ok(&[
        "query",
        "--data-dir",
        s(&idx),
        "--input",
        s(&q),
        "-k",
        "10",
        "--media",
        "--top",
        "1",
    ]);
    assert_eq!(votes[0]["media"], 41);
}

#[test]
fn unusable_log_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.fvecs");
    ok(&["gen", "--output", s(&data), "--n", "100", "--dim", "4"]);
    // A regular file cannot hold a log directory, even for root.
    let blocker = dir.path().join("not-a-dir");
    std::fs::write(&blocker, b"x").unwrap();
    let idx = dir.path().join("idx");
    let log = blocker.join("wal");
    for cmd in ["insert", "build"] {
        let out = nvt(&[
            cmd,
            "--data-dir",
            s(&idx),
            "--log-dir",
            s(&log),
            "--input",
            s(&data),
        ]);
        assert!(!out.status.success(), "{cmd} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
        assert!(!idx.exists(), "{cmd} left a partial index behind");
    }
}

#[test]
fn bad_input_is_a_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fvecs");
    let out = nvt(&[
        "build",
        "--data-dir",
        s(&dir.path().join("i")),
        "--input",
        s(&missing),
    ]);
    assert!(!out.status.success());
    let out = nvt(&[
        "query",
        "--data-dir",
        s(&dir.path().join("nothing")),
        "--input",
        s(&missing),
    ]);
    assert!(!out.status.success());
    let out = nvt(&[
        "--fault-point",
        "no-such-point:1",
        "recover",
        "--data-dir",
        "x",
    ]);
    assert!(!out.status.success());
}

#[test]
fn fault_flag_crashes_insert_and_recover_restores_the_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.fvecs");
    let idx = dir.path().join("idx");
    ok(&["gen", "--output", s(&data), "--n", "5000", "--dim", "8"]);
    let out = nvt(&[
        "--fault-point",
        "commit-before-record-flush:3",
        "insert",
        "--data-dir",
        s(&idx),
        "--input",
        s(&data),
        "--batch",
        "1000",
    ]);
    assert!(!out.status.success());
    let report = ok(&["recover", "--data-dir", s(&idx)]);
    assert_eq!(report[0]["committed_tid"], 2);
    let all = read_vectors(&data).unwrap();
    let q = dir.path().join("q.fvecs");
    write_vectors(&q, &[all[1999].clone(), all[2000].clone()]).unwrap();
    let lines = ok(&["query", "--data-dir", s(&idx), "--input", s(&q), "-k", "5"]);
    assert_eq!(lines[0]["ids"][0], 1999);
    assert!(!lines[1]["ids"]
        .as_array()
        .unwrap()
        .contains(&Value::from(2000)));
}

#[test]
fn sweep_is_reproducible_from_the_seed() {
    let args = [
        "bench",
        "--sweep",
        "--scales",
        "3000,6000",
        "--dim",
        "16",
        "--queries",
        "200",
        "--seed",
        "4",
    ];
    let a = ok(&args);
    let b = ok(&args);
    let report = |lines: &[Value]| {
        lines
            .iter()
            .find(|l| l.get("recall_report").is_some())
            .cloned()
            .expect("report line")
    };
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(ra, rb);
    let points = ra["recall_report"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["read_deviations"], 0);
}
