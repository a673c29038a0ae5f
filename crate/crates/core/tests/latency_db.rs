use dooly_core::corpus::{backend, llama31_8b};
use dooly_core::modelir::Phase;
use dooly_core::opset::WorkloadPoint;
use dooly_core::profiler::db::{DbError, SCHEMA_SQL};
use dooly_core::profiler::{runnable_set, sign_entries, LatencyDb, LatencyRecord, SignedEntry, Source};

fn signed() -> Vec<SignedEntry> {
    let m = llama31_8b();
    let (set, _) = runnable_set(&m, &backend("flashinfer", std::slice::from_ref(&m)), 1).unwrap();
    sign_entries(&set)
}

fn with_signatures(db: &LatencyDb, s: &[SignedEntry]) {
    for e in s {
        db.insert_signature(&e.signature, &e.entry).unwrap();
    }
}

fn rec(hash: [u8; 32], toks: u64, latency: f64) -> LatencyRecord {
    LatencyRecord {
        signature_hash: hash,
        workload: WorkloadPoint {
            num_toks: toks,
            num_reqs: 1,
            phase: Phase::Prefill,
            chunk: 8192,
            kv_len: 0,
        },
        latency_s: latency,
        source: Source::Oracle,
    }
}

#[test]
fn persists_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lat.db");
    let s = signed();
    let h = s[0].signature.hash;
    {
        let mut db = LatencyDb::open(&path).unwrap();
        with_signatures(&db, &s);
        db.insert_measurements(&[rec(h, 16, 1.5e-5), rec(h, 512, 3.25e-5)]).unwrap();
        db.insert_comm("nvlink", 4, "all_reduce", 1024, 7e-6).unwrap();
    }
    let db = LatencyDb::open(&path).unwrap();
    assert!(db.has_signature(&h).unwrap());
    assert_eq!(db.signature_entry(&h).unwrap().as_ref(), Some(&s[0].entry));
    assert_eq!(db.measurements(&h).unwrap(), vec![rec(h, 16, 1.5e-5), rec(h, 512, 3.25e-5)]);
    assert_eq!(db.comm_table("nvlink", 4, "all_reduce").unwrap(), vec![(1024, 7e-6)]);
    assert!(db.comm_table("nvlink", 2, "all_reduce").unwrap().is_empty());
}

#[test]
fn exact_and_range_queries() {
    let s = signed();
    let h = s[0].signature.hash;
    let mut db = LatencyDb::in_memory().unwrap();
    with_signatures(&db, &s);
    let recs: Vec<_> = [1, 16, 128, 512, 2048].iter().map(|t| rec(h, *t, *t as f64 * 1e-6 + 5e-6)).collect();
    assert_eq!(db.insert_measurements(&recs).unwrap(), 5);
    assert_eq!(db.insert_measurements(&recs).unwrap(), 0);
    assert_eq!(db.measurement(&h, &recs[2].workload).unwrap(), Some(recs[2].clone()));
    let mid = db.measurements_in_range(&h, 16, 512).unwrap();
    assert_eq!(mid, recs[1..4].to_vec());
    assert!(db.measurements(&s[1].signature.hash).unwrap().is_empty());
}

#[test]
fn conflicting_latency_is_duplicate_key() {
    let s = signed();
    let h = s[0].signature.hash;
    let mut db = LatencyDb::in_memory().unwrap();
    with_signatures(&db, &s);
    db.insert_measurements(&[rec(h, 16, 1e-5)]).unwrap();
    let err = db.insert_measurements(&[rec(h, 32, 2e-5), rec(h, 16, 9e-5)]).unwrap_err();
    assert!(matches!(err, DbError::DuplicateKey { stored, new, .. } if stored == 1e-5 && new == 9e-5));
    // the batch is atomic
    assert_eq!(db.measurement_count().unwrap(), 1);
}

#[test]
fn measurement_without_signature_rejected() {
    let mut db = LatencyDb::in_memory().unwrap();
    let err = db.insert_measurements(&[rec([3; 32], 16, 1e-5)]).unwrap_err();
    assert!(matches!(err, DbError::Integrity(_)), "{err:?}");
    assert!(matches!(db.insert_measurements(&[rec([3; 32], 16, -1.0)]), Err(DbError::BadRecord(_))));
}

#[test]
fn export_import_roundtrip() {
    let s = signed();
    let mut a = LatencyDb::in_memory().unwrap();
    with_signatures(&a, &s);
    let recs: Vec<_> = s.iter().enumerate().map(|(i, e)| rec(e.signature.hash, 1 + i as u64, 1.0 / 3.0 + i as f64)).collect();
    a.insert_measurements(&recs).unwrap();
    let text = a.export_jsonl().unwrap();
    let mut b = LatencyDb::in_memory().unwrap();
    with_signatures(&b, &s);
    assert_eq!(b.import_jsonl(&text).unwrap(), recs.len());
    assert_eq!(b.all_measurements().unwrap(), a.all_measurements().unwrap());
    assert_eq!(b.export_jsonl().unwrap(), text);
    assert!(matches!(b.import_jsonl("{not json"), Err(DbError::BadRecord(_))));
}

#[test]
fn foreign_sqlite_file_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("other.db");
    rusqlite::Connection::open(&path).unwrap().execute_batch("CREATE TABLE t (x INTEGER);").unwrap();
    assert!(matches!(LatencyDb::open(&path), Err(DbError::StoreUnavailable(_))));
    let stale = dir.path().join("stale.db");
    drop(LatencyDb::open(&stale).unwrap());
    rusqlite::Connection::open(&stale)
        .unwrap()
        .execute("UPDATE schema_meta SET value = '0' WHERE key = 'schema_version'", [])
        .unwrap();
    assert!(matches!(LatencyDb::open(&stale), Err(DbError::SchemaMismatch { .. })));
}

#[test]
fn schema_file_is_the_dump() {
    let committed = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schema/latency_db.sql")).unwrap();
    assert_eq!(SCHEMA_SQL, committed);
    assert_eq!(LatencyDb::in_memory().unwrap().schema_dump().unwrap(), committed);
}
