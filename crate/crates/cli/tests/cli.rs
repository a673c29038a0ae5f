use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dooly_core::profiler::db::SCHEMA_SQL;
use dooly_core::tracer::chrome;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dooly(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dooly"))
        .env_remove("DOOLY_DB")
        .arg("--db")
        .arg(dir.join("lat.db"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(name: &str) -> String {
    root().join("manifests").join(name).display().to_string()
}

#[test]
fn schema_dump_prints_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = dooly(dir.path(), &["--schema-dump"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), SCHEMA_SQL);
}

#[test]
fn trace_is_deterministic_and_reimportable() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("fixtures_tp1.json");
    let args = ["--manifest", &m, "trace", "--model", "Llama-3.1-8B", "--backend", "flashinfer"];
    let a = dooly(dir.path(), &args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let path = dir.path().join("out/trace_llama_3_1_8b_flashinfer.json");
    let first = fs::read_to_string(&path).unwrap();
    let b = dooly(dir.path(), &args);
    assert_eq!(stdout(&a), stdout(&b));
    let second = fs::read_to_string(&path).unwrap();
    assert_eq!(first, second);
    let trace = chrome::import(&first).unwrap();
    assert_eq!(chrome::export(&trace), first);
    assert!(stdout(&a).contains("retraced: no"));
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("fixtures_tp1.json");
    let o = dooly(dir.path(), &["--manifest", &m, "trace", "--model", "GPT-5", "--backend", "flashinfer"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dooly(dir.path(), &["--manifest", &m, "trace", "--model", "Llama-3.1-8B", "--backend", "flashinfer", "--batch", "0,4"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 99}").unwrap();
    let o = dooly(dir.path(), &["--manifest", bad.to_str().unwrap(), "profile"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dooly(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_without_profile_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("serving.json");
    let w = root().join("workloads/decode_heavy.json").display().to_string();
    let o = dooly(dir.path(), &["--manifest", &m, "simulate", "--model", "Llama-3.1-8B", "--backend", "flashinfer", "--workload", &w]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = dooly(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("database has no profiled configurations"));
}

#[test]
fn profile_simulate_export_import() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("serving.json");
    let thin = dooly(dir.path(), &["--manifest", &m, "profile", "--thin", "2"]);
    assert_eq!(thin.status.code(), Some(0));
    let w = root().join("workloads/decode_heavy.json").display().to_string();
    let sim = ["--manifest", &m, "simulate", "--model", "Llama-3.1-8B", "--backend", "flashinfer", "--workload", &w, "--reference"];
    // three request counts cannot fit the lm_head regressor
    let o = dooly(dir.path(), &sim);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("need 4"));

    let first = dooly(dir.path(), &["--manifest", &m, "profile"]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let dump = dir.path().join("a.jsonl");
    let o = dooly(dir.path(), &["export", "--file", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let before = fs::read_to_string(&dump).unwrap();
    assert!(!before.is_empty());

    // a second profile finds every signature already stored
    let again = dooly(dir.path(), &["--manifest", &m, "profile"]);
    assert_eq!(again.status.code(), Some(0));
    dooly(dir.path(), &["export", "--file", dump.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&dump).unwrap(), before);

    let o = dooly(dir.path(), &sim);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("TTFT MAPE"));
    for f in ["sim_metrics.csv", "sim_summary.json", "reference_metrics.csv", "sim_ttft_cdf.svg"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }

    let rep = dooly(dir.path(), &["report"]);
    assert_eq!(rep.status.code(), Some(0));
    assert!(stdout(&rep).contains("Llama-3.1-8B"));

    // signatures travel with profiling, not with the dump
    let empty = tempfile::tempdir().unwrap();
    let o = dooly(empty.path(), &["import", "--file", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let other = tempfile::tempdir().unwrap();
    assert_eq!(dooly(other.path(), &["--manifest", &m, "profile", "--thin", "2"]).status.code(), Some(0));
    let o = dooly(other.path(), &["import", "--file", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dump2 = other.path().join("b.jsonl");
    dooly(other.path(), &["export", "--file", dump2.to_str().unwrap()]);
    let after = fs::read_to_string(&dump2).unwrap();
    assert_eq!(after, before);
    let o = dooly(other.path(), &sim);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
