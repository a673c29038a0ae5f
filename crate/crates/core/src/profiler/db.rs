//! Single-file latency database (SQLite).

use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::signature::{hex, Hash, Signature};
use crate::modelir::Phase;
use crate::opset::{CollectiveEntry, RunnableEntry, WorkloadPoint};

pub const SCHEMA_SQL: &str = include_str!("../../schema/latency_db.sql");
pub const DB_SCHEMA_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("latency store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("duplicate measurement for {hash} at {workload:?}: stored {stored}, new {new}")]
    DuplicateKey {
        hash: String,
        workload: WorkloadPoint,
        stored: f64,
        new: f64,
    },
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("schema version {found} is not {expected}")]
    SchemaMismatch { found: String, expected: &'static str },
    #[error("bad record: {0}")]
    BadRecord(String),
}

impl From<rusqlite::Error> for DbError {
    fn from(e: rusqlite::Error) -> Self {
        match &e {
            rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                DbError::Integrity(e.to_string())
            }
            _ => DbError::StoreUnavailable(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Oracle,
    Imported,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Oracle => "oracle",
            Source::Imported => "imported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    #[serde(rename = "sig", with = "hash_hex")]
    pub signature_hash: Hash,
    pub workload: WorkloadPoint,
    pub latency_s: f64,
    pub source: Source,
}

pub(crate) mod hash_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &super::Hash, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::hex(h))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<super::Hash, D::Error> {
        let s = String::deserialize(d)?;
        super::super::signature::parse_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

pub struct LatencyDb {
    conn: Connection,
}

fn blob(h: &Hash) -> &[u8] {
    h.as_slice()
}

fn to_hash(v: Vec<u8>) -> rusqlite::Result<Hash> {
    v.try_into()
        .map_err(|_| rusqlite::Error::InvalidColumnType(0, "hash".into(), rusqlite::types::Type::Blob))
}

fn phase_of(s: String) -> rusqlite::Result<Phase> {
    s.parse()
        .map_err(|_| rusqlite::Error::InvalidColumnType(0, "phase".into(), rusqlite::types::Type::Text))
}

fn json_err(e: serde_json::Error) -> DbError {
    DbError::BadRecord(e.to_string())
}

impl LatencyDb {
    pub fn open(path: &Path) -> Result<Self, DbError> {
        let conn = Connection::open(path).map_err(|e| DbError::StoreUnavailable(format!("{}: {e}", path.display())))?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self, DbError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, DbError> {
        conn.execute_batch("PRAGMA foreign_keys = ON;")?;
        let fresh: i64 = conn.query_row("SELECT count(*) FROM sqlite_master WHERE type = 'table'", [], |r| r.get(0))?;
        if fresh == 0 {
            let tx = conn.unchecked_transaction()?;
            tx.execute_batch(SCHEMA_SQL)?;
            tx.execute(
                "INSERT INTO schema_meta (key, value) VALUES ('schema_version', ?1)",
                [DB_SCHEMA_VERSION],
            )?;
            tx.commit()?;
        }
        let found: Option<String> = conn
            .query_row("SELECT value FROM schema_meta WHERE key = 'schema_version'", [], |r| r.get(0))
            .optional()
            .map_err(|e| DbError::StoreUnavailable(format!("not a latency database: {e}")))?;
        match found {
            Some(v) if v == DB_SCHEMA_VERSION => Ok(Self { conn }),
            other => Err(DbError::SchemaMismatch {
                found: other.unwrap_or_else(|| "none".into()),
                expected: DB_SCHEMA_VERSION,
            }),
        }
    }

    /// The logical schema: every table definition, in creation order.
    pub fn schema_dump(&self) -> Result<String, DbError> {
        let mut stmt = self
            .conn
            .prepare("SELECT sql FROM sqlite_master WHERE type = 'table' AND sql IS NOT NULL ORDER BY rowid")?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        let mut out = String::new();
        for r in rows {
            out.push_str(&r?);
            out.push_str(";\n");
        }
        Ok(out)
    }

    pub fn config_id(&self, hardware: &str, model: &str, backend: &str, tp: u64) -> Result<i64, DbError> {
        self.conn.execute(
            "INSERT OR IGNORE INTO configurations (hardware, model, backend, tp_degree) VALUES (?1, ?2, ?3, ?4)",
            params![hardware, model, backend, tp as i64],
        )?;
        Ok(self.conn.query_row(
            "SELECT config_id FROM configurations WHERE hardware = ?1 AND model = ?2 AND backend = ?3 AND tp_degree = ?4",
            params![hardware, model, backend, tp as i64],
            |r| r.get(0),
        )?)
    }

    pub fn find_config(&self, hardware: &str, model: &str, backend: &str, tp: u64) -> Result<Option<i64>, DbError> {
        Ok(self
            .conn
            .query_row(
                "SELECT config_id FROM configurations WHERE hardware = ?1 AND model = ?2 AND backend = ?3 AND tp_degree = ?4",
                params![hardware, model, backend, tp as i64],
                |r| r.get(0),
            )
            .optional()?)
    }

    pub fn has_signature(&self, hash: &Hash) -> Result<bool, DbError> {
        Ok(self
            .conn
            .query_row("SELECT 1 FROM signatures WHERE hash = ?1", [blob(hash)], |_| Ok(()))
            .optional()?
            .is_some())
    }

    /// Insert a signature row; returns false if it already existed.
    pub fn insert_signature(&self, sig: &Signature, entry: &RunnableEntry) -> Result<bool, DbError> {
        let n = self.conn.execute(
            "INSERT OR IGNORE INTO signatures (hash, op_name, granularity, model_dims, kernel_symbols, attr_digest, context_required, entry)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                blob(&sig.hash),
                sig.op_name,
                match sig.granularity {
                    crate::opset::Granularity::Operator => "operator",
                    crate::opset::Granularity::Module => "module",
                },
                serde_json::to_string(&sig.model_dims).map_err(json_err)?,
                serde_json::to_string(&sig.kernel_symbols).map_err(json_err)?,
                sig.attr_digest.as_ref().map(|d| d.to_vec()),
                entry.context_required,
                serde_json::to_string(entry).map_err(json_err)?,
            ],
        )?;
        Ok(n == 1)
    }

    pub fn signature_entry(&self, hash: &Hash) -> Result<Option<RunnableEntry>, DbError> {
        let text: Option<String> = self
            .conn
            .query_row("SELECT entry FROM signatures WHERE hash = ?1", [blob(hash)], |r| r.get(0))
            .optional()?;
        text.map(|t| serde_json::from_str(&t).map_err(json_err)).transpose()
    }

    pub fn signature_count(&self) -> Result<u64, DbError> {
        Ok(self.conn.query_row("SELECT count(*) FROM signatures", [], |r| r.get::<_, i64>(0))? as u64)
    }

    /// Replace the operation list of a configuration.
    pub fn set_model_operations(&mut self, config_id: i64, ops: &[(Hash, u64)]) -> Result<(), DbError> {
        let tx = self.conn.transaction()?;
        tx.execute("DELETE FROM model_operations WHERE config_id = ?1", [config_id])?;
        for (h, n) in ops {
            tx.execute(
                "INSERT INTO model_operations (config_id, signature_hash, repeat_count) VALUES (?1, ?2, ?3)",
                params![config_id, blob(h), *n as i64],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn model_operations(&self, config_id: i64) -> Result<Vec<(Hash, u64)>, DbError> {
        let mut stmt = self.conn.prepare(
            "SELECT signature_hash, repeat_count FROM model_operations WHERE config_id = ?1 ORDER BY signature_hash",
        )?;
        let rows = stmt.query_map([config_id], |r| Ok((to_hash(r.get(0)?)?, r.get::<_, i64>(1)? as u64)))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn set_collectives(&mut self, config_id: i64, colls: &[CollectiveEntry]) -> Result<(), DbError> {
        let tx = self.conn.transaction()?;
        tx.execute("DELETE FROM model_collectives WHERE config_id = ?1", [config_id])?;
        for c in colls {
            tx.execute(
                "INSERT INTO model_collectives (config_id, path, entry, repeat_count) VALUES (?1, ?2, ?3, ?4)",
                params![
                    config_id,
                    c.path,
                    serde_json::to_string(c).map_err(json_err)?,
                    c.repeat_count as i64
                ],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    /// Insert measurements atomically. Re-inserting an identical record is a
    /// no-op; a different latency under the same key is rejected.
    pub fn insert_measurements(&mut self, records: &[LatencyRecord]) -> Result<usize, DbError> {
        let tx = self.conn.transaction()?;
        let mut inserted = 0;
        {
            let mut ins = tx.prepare(
                "INSERT OR IGNORE INTO measurements (signature_hash, num_toks, num_reqs, phase, chunk, kv_len, latency_s, source)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            )?;
            let mut get = tx.prepare(
                "SELECT latency_s FROM measurements WHERE signature_hash = ?1 AND num_toks = ?2 AND num_reqs = ?3
                 AND phase = ?4 AND chunk = ?5 AND kv_len = ?6",
            )?;
            for r in records {
                if !(r.latency_s.is_finite() && r.latency_s > 0.0) {
                    return Err(DbError::BadRecord(format!("latency {} is not positive", r.latency_s)));
                }
                let w = &r.workload;
                let key = params![
                    blob(&r.signature_hash),
                    w.num_toks as i64,
                    w.num_reqs as i64,
                    w.phase.as_str(),
                    w.chunk as i64,
                    w.kv_len as i64
                ];
                let n = ins.execute(params![
                    blob(&r.signature_hash),
                    w.num_toks as i64,
                    w.num_reqs as i64,
                    w.phase.as_str(),
                    w.chunk as i64,
                    w.kv_len as i64,
                    r.latency_s,
                    r.source.as_str()
                ])?;
                if n == 0 {
                    let stored: f64 = get.query_row(key, |row| row.get(0))?;
                    if stored != r.latency_s {
                        return Err(DbError::DuplicateKey {
                            hash: hex(&r.signature_hash),
                            workload: *w,
                            stored,
                            new: r.latency_s,
                        });
                    }
                }
                inserted += n;
            }
        }
        tx.commit()?;
        Ok(inserted)
    }

    fn row_to_record(r: &rusqlite::Row<'_>) -> rusqlite::Result<LatencyRecord> {
        Ok(LatencyRecord {
            signature_hash: to_hash(r.get(0)?)?,
            workload: WorkloadPoint {
                num_toks: r.get::<_, i64>(1)? as u64,
                num_reqs: r.get::<_, i64>(2)? as u64,
                phase: phase_of(r.get(3)?)?,
                chunk: r.get::<_, i64>(4)? as u64,
                kv_len: r.get::<_, i64>(5)? as u64,
            },
            latency_s: r.get(6)?,
            source: match r.get::<_, String>(7)?.as_str() {
                "imported" => Source::Imported,
                _ => Source::Oracle,
            },
        })
    }

    const SELECT: &'static str =
        "SELECT signature_hash, num_toks, num_reqs, phase, chunk, kv_len, latency_s, source FROM measurements";

    pub fn measurements(&self, hash: &Hash) -> Result<Vec<LatencyRecord>, DbError> {
        let mut stmt = self.conn.prepare(&format!(
            "{} WHERE signature_hash = ?1 ORDER BY phase, num_toks, num_reqs, chunk, kv_len",
            Self::SELECT
        ))?;
        let rows = stmt.query_map([blob(hash)], Self::row_to_record)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn measurement(&self, hash: &Hash, w: &WorkloadPoint) -> Result<Option<LatencyRecord>, DbError> {
        Ok(self
            .conn
            .query_row(
                &format!(
                    "{} WHERE signature_hash = ?1 AND num_toks = ?2 AND num_reqs = ?3 AND phase = ?4 AND chunk = ?5 AND kv_len = ?6",
                    Self::SELECT
                ),
                params![
                    blob(hash),
                    w.num_toks as i64,
                    w.num_reqs as i64,
                    w.phase.as_str(),
                    w.chunk as i64,
                    w.kv_len as i64
                ],
                Self::row_to_record,
            )
            .optional()?)
    }

    /// Records with `num_toks` in `[lo, hi]`.
    pub fn measurements_in_range(&self, hash: &Hash, lo: u64, hi: u64) -> Result<Vec<LatencyRecord>, DbError> {
        let mut stmt = self.conn.prepare(&format!(
            "{} WHERE signature_hash = ?1 AND num_toks BETWEEN ?2 AND ?3 ORDER BY phase, num_toks, num_reqs, chunk, kv_len",
            Self::SELECT
        ))?;
        let rows = stmt.query_map(params![blob(hash), lo as i64, hi as i64], Self::row_to_record)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn measurement_count(&self) -> Result<u64, DbError> {
        Ok(self.conn.query_row("SELECT count(*) FROM measurements", [], |r| r.get::<_, i64>(0))? as u64)
    }

    pub fn all_measurements(&self) -> Result<Vec<LatencyRecord>, DbError> {
        let mut stmt = self.conn.prepare(&format!(
            "{} ORDER BY signature_hash, phase, num_toks, num_reqs, chunk, kv_len",
            Self::SELECT
        ))?;
        let rows = stmt.query_map([], Self::row_to_record)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Measurements as JSON lines.
    pub fn export_jsonl(&self) -> Result<String, DbError> {
        let mut out = String::new();
        for r in self.all_measurements()? {
            out.push_str(&serde_json::to_string(&r).map_err(json_err)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Load JSON-lines measurements. The referenced signatures must exist.
    pub fn import_jsonl(&mut self, text: &str) -> Result<usize, DbError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<LatencyRecord>(l).map_err(|e| DbError::BadRecord(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.insert_measurements(&records)
    }

    pub fn insert_comm(&self, topology: &str, tp: u64, op: &str, bytes: u64, latency_s: f64) -> Result<(), DbError> {
        self.conn.execute(
            "INSERT OR REPLACE INTO comm_measurements (topology, tp_degree, op, bytes, latency_s) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![topology, tp as i64, op, bytes as i64, latency_s],
        )?;
        Ok(())
    }

    /// `(bytes, latency)` rows for one topology and tp degree, by size.
    pub fn comm_table(&self, topology: &str, tp: u64, op: &str) -> Result<Vec<(u64, f64)>, DbError> {
        let mut stmt = self.conn.prepare(
            "SELECT bytes, latency_s FROM comm_measurements WHERE topology = ?1 AND tp_degree = ?2 AND op = ?3 ORDER BY bytes",
        )?;
        let rows = stmt.query_map(params![topology, tp as i64, op], |r| Ok((r.get::<_, i64>(0)? as u64, r.get(1)?)))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn cached_regressor(&self, hash: &Hash, measurement_count: u64) -> Result<Option<String>, DbError> {
        Ok(self
            .conn
            .query_row(
                "SELECT model FROM regressors WHERE signature_hash = ?1 AND measurement_count = ?2",
                params![blob(hash), measurement_count as i64],
                |r| r.get(0),
            )
            .optional()?)
    }

    pub fn cache_regressor(&self, hash: &Hash, measurement_count: u64, model: &str) -> Result<(), DbError> {
        self.conn.execute(
            "INSERT OR REPLACE INTO regressors (signature_hash, measurement_count, model) VALUES (?1, ?2, ?3)",
            params![blob(hash), measurement_count as i64, model],
        )?;
        Ok(())
    }
}

/// One row of the configurations table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigRow {
    pub config_id: i64,
    pub hardware: String,
    pub model: String,
    pub backend: String,
    pub tp_degree: u64,
}

impl LatencyDb {
    /// Configurations in insertion order.
    pub fn configurations(&self) -> Result<Vec<ConfigRow>, DbError> {
        let mut stmt = self
            .conn
            .prepare("SELECT config_id, hardware, model, backend, tp_degree FROM configurations ORDER BY config_id")?;
        let rows = stmt.query_map([], |r| {
            Ok(ConfigRow {
                config_id: r.get(0)?,
                hardware: r.get(1)?,
                model: r.get(2)?,
                backend: r.get(3)?,
                tp_degree: r.get::<_, i64>(4)? as u64,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Every stored signature hash, ascending.
    pub fn signature_hashes(&self) -> Result<Vec<Hash>, DbError> {
        let mut stmt = self.conn.prepare("SELECT hash FROM signatures ORDER BY hash")?;
        let rows = stmt.query_map([], |r| to_hash(r.get(0)?))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Sum of stored latencies per signature.
    pub fn measured_seconds(&self, hash: &Hash) -> Result<f64, DbError> {
        Ok(self.conn.query_row(
            "SELECT coalesce(sum(latency_s), 0.0) FROM measurements WHERE signature_hash = ?1",
            [blob(hash)],
            |r| r.get(0),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_matches_committed_schema() {
        let db = LatencyDb::in_memory().unwrap();
        assert_eq!(db.schema_dump().unwrap(), SCHEMA_SQL);
    }

    #[test]
    fn orphan_operation_rejected() {
        let mut db = LatencyDb::in_memory().unwrap();
        let id = db.config_id("hw", "m", "b", 1).unwrap();
        let err = db.set_model_operations(id, &[([7; 32], 1)]).unwrap_err();
        assert!(matches!(err, DbError::Integrity(_)));
    }

    #[test]
    fn unknown_hash_is_empty() {
        let db = LatencyDb::in_memory().unwrap();
        assert!(db.measurements(&[1; 32]).unwrap().is_empty());
        assert!(!db.has_signature(&[1; 32]).unwrap());
    }
}
