//! Canonical signatures of runnable entries.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! "sigfmt=1"
//! u32 len, op_name bytes
//! u32 count, then (u32 position, u64 value) sorted by position
//! u32 count, then sorted kernel symbols, each as u32 len + bytes
//! u8 flag (0 = no attrs, 1 = module attrs), then 32-byte attr digest if flag = 1
//! ```
//!
//! Positions index the flattened input dims; scalars sit at `2^16 + i`.
//! Only model-config content is serialized: workload-tainted and untainted
//! values are skipped, and a Mix contributes the product of its model-config
//! components.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::opset::{Granularity, RunnableEntry};
use crate::taint::{Taint, TaintLabel};
use crate::tracer::AttrValue;

pub const SIGFMT: &[u8] = b"sigfmt=1";
pub const SCALAR_OFFSET: u32 = 1 << 16;

pub type Hash = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub op_name: String,
    pub granularity: Granularity,
    pub model_dims: Vec<(u32, u64)>,
    pub kernel_symbols: Vec<String>,
    #[serde(with = "opt_hex")]
    pub attr_digest: Option<Hash>,
    #[serde(with = "hex_hash")]
    pub hash: Hash,
}

fn model_value(value: u64, taint: &Taint) -> Option<u64> {
    match taint {
        Taint::Base(TaintLabel::ModelConfig) => Some(value),
        Taint::Mix(m) if m.iter().any(|(_, l)| l == TaintLabel::ModelConfig) => Some(m.model_product()),
        _ => None,
    }
}

pub fn model_dims(entry: &RunnableEntry) -> Vec<(u32, u64)> {
    let dims = entry
        .inputs
        .iter()
        .flatten()
        .enumerate()
        .filter_map(|(i, d)| model_value(d.size, &d.taint).map(|v| (i as u32, v)));
    let scalars = entry
        .scalars
        .iter()
        .enumerate()
        .filter_map(|(i, s)| model_value(s.value, &s.taint).map(|v| (SCALAR_OFFSET + i as u32, v)));
    dims.chain(scalars).collect()
}

/// SHA-256 over the sorted `(key, value)` pairs.
pub fn attr_digest(attrs: &BTreeMap<String, AttrValue>) -> Hash {
    let mut h = Sha256::new();
    for (k, v) in attrs {
        h.update((k.len() as u32).to_le_bytes());
        h.update(k.as_bytes());
        match v {
            AttrValue::Bool(b) => h.update([b'b', u8::from(*b)]),
            AttrValue::Int(i) => {
                h.update(b"i");
                h.update(i.to_le_bytes());
            }
            AttrValue::Str(s) => {
                h.update(b"s");
                h.update((s.len() as u32).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    h.finalize().into()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn canonical_parts(op_name: &str, dims: &[(u32, u64)], kernels: &[String], digest: Option<&Hash>) -> Vec<u8> {
    let mut out = SIGFMT.to_vec();
    put_str(&mut out, op_name);
    let mut dims = dims.to_vec();
    dims.sort();
    out.extend((dims.len() as u32).to_le_bytes());
    for (p, v) in dims {
        out.extend(p.to_le_bytes());
        out.extend(v.to_le_bytes());
    }
    let mut ks: Vec<&String> = kernels.iter().collect();
    ks.sort();
    ks.dedup();
    out.extend((ks.len() as u32).to_le_bytes());
    for k in ks {
        put_str(&mut out, k);
    }
    match digest {
        Some(d) => {
            out.push(1);
            out.extend(d);
        }
        None => out.push(0),
    }
    out
}

fn entry_digest(entry: &RunnableEntry) -> Option<Hash> {
    (entry.granularity == Granularity::Module).then(|| attr_digest(&entry.attrs))
}

pub fn canonicalize(entry: &RunnableEntry) -> Vec<u8> {
    canonical_parts(&entry.name, &model_dims(entry), &entry.kernel_symbols, entry_digest(entry).as_ref())
}

pub fn signature_hash(canonical: &[u8]) -> Hash {
    Sha256::digest(canonical).into()
}

pub fn signature(entry: &RunnableEntry) -> Signature {
    let mut kernel_symbols = entry.kernel_symbols.clone();
    kernel_symbols.sort();
    kernel_symbols.dedup();
    Signature {
        op_name: entry.name.clone(),
        granularity: entry.granularity,
        model_dims: {
            let mut d = model_dims(entry);
            d.sort();
            d
        },
        kernel_symbols,
        attr_digest: entry_digest(entry),
        hash: signature_hash(&canonicalize(entry)),
    }
}

pub fn hex(hash: &Hash) -> String {
    ::hex::encode(hash)
}

pub fn parse_hex(s: &str) -> Option<Hash> {
    ::hex::decode(s).ok()?.try_into().ok()
}

mod hex_hash {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &super::Hash, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::hex(h))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<super::Hash, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &Option<super::Hash>, s: S) -> Result<S::Ok, S::Error> {
        match h {
            Some(h) => s.serialize_some(&super::hex(h)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<super::Hash>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| super::parse_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits")))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_vector() {
        assert_eq!(
            hex(&signature_hash(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn layout_is_order_independent() {
        let a = canonical_parts("x", &[(2, 8), (0, 4096)], &["b".into(), "a".into()], None);
        let b = canonical_parts("x", &[(0, 4096), (2, 8)], &["a".into(), "b".into()], None);
        assert_eq!(a, b);
        assert!(a.starts_with(SIGFMT));
        let c = canonical_parts("x", &[(0, 4096), (2, 8)], &["a".into(), "b".into()], Some(&[0; 32]));
        assert_ne!(a, c);
    }

    #[test]
    fn mix_contributes_model_product() {
        let t: Taint = "MIX{40:MC,269:NT}".parse().unwrap();
        assert_eq!(model_value(10760, &t), Some(40));
        assert_eq!(model_value(538, &Taint::NT), None);
        assert_eq!(model_value(7, &Taint::Bot), None);
    }
}
