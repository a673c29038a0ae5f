//! Provenance lattice for integer shape values.
//!
//! Every scalar and tensor dimension seen during a symbolic forward pass carries
//! a [`Taint`]: untainted (`Bot`), a single base label, or a `Mix` recording which
//! concrete factor came from which source. The combination operator follows five
//! rules:
//!
//! | operands                 | result             | rule        |
//! |--------------------------|--------------------|-------------|
//! | `Bot ⊗ t`                | `t`                | absorption  |
//! | `t ⊗ t`                  | `t`                | preservation|
//! | `l1 ⊗ l2` (`l1 != l2`)   | `Mix{l1, l2}`      | conflict    |
//! | `Mix(H) ⊗ l`             | `Mix(H ∪ {l})`     | extend      |
//! | `Mix(H1) ⊗ Mix(H2)`      | `Mix(H1 ∪ H2)`     | merge       |
//!
//! The textual form (`BOT`, `MC`, `NT`, `NR`, `MIX{40:MC,269:NT}`) is part of the
//! trace file format and round-trips exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaintError {
    #[error("value {value} is mapped to both {first} and {second} in one MIX")]
    MixValueConflict {
        value: u64,
        first: TaintLabel,
        second: TaintLabel,
    },
    #[error("value {0} is not a component of the MIX")]
    UnknownComponent(u64),
    #[error("expected a MIX taint, got {0}")]
    NotMix(Taint),
    #[error("MIX component values must be positive")]
    ZeroComponent,
    #[error("malformed taint string {0:?}")]
    Parse(String),
}

/// Base provenance labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaintLabel {
    #[serde(rename = "MC")]
    ModelConfig,
    #[serde(rename = "NT")]
    NumToks,
    #[serde(rename = "NR")]
    NumReqs,
}

impl TaintLabel {
    pub const ALL: [TaintLabel; 3] = [Self::ModelConfig, Self::NumToks, Self::NumReqs];

    pub fn code(self) -> &'static str {
        match self {
            Self::ModelConfig => "MC",
            Self::NumToks => "NT",
            Self::NumReqs => "NR",
        }
    }

    /// True for labels that vary with the incoming request batch.
    pub fn is_workload(self) -> bool {
        !matches!(self, Self::ModelConfig)
    }

    fn from_code(s: &str) -> Option<Self> {
        match s {
            "MC" => Some(Self::ModelConfig),
            "NT" => Some(Self::NumToks),
            "NR" => Some(Self::NumReqs),
            _ => None,
        }
    }
}

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Component map of a composite taint: concrete factor value → base label.
///
/// Always holds at least two entries; iteration is ascending by value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MixMap(BTreeMap<u64, TaintLabel>);

impl MixMap {
    pub fn get(&self, value: u64) -> Option<TaintLabel> {
        self.0.get(&value).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, TaintLabel)> + '_ {
        self.0.iter().map(|(v, l)| (*v, *l))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Product of all component values.
    pub fn product(&self) -> u64 {
        self.0.keys().product()
    }

    /// Product of the `MODEL_CONFIG` components.
    pub fn model_product(&self) -> u64 {
        self.iter()
            .filter(|(_, l)| !l.is_workload())
            .map(|(v, _)| v)
            .product()
    }

    /// Recompute this composite under new workload values.
    ///
    /// Workload components whose label appears in `subs` take the substituted
    /// value; `MODEL_CONFIG` components keep theirs. The returned size is the
    /// product over all original components. If a substituted value lands on a
    /// key already held by a different label, the model component keeps the key.
    pub fn reevaluate(&self, subs: &BTreeMap<TaintLabel, u64>) -> (u64, Taint) {
        let mut size = 1u64;
        let mut out: BTreeMap<u64, TaintLabel> = BTreeMap::new();
        let substituted: Vec<(u64, TaintLabel)> = self
            .iter()
            .map(|(v, l)| match subs.get(&l) {
                Some(s) if l.is_workload() => (*s, l),
                _ => (v, l),
            })
            .collect();
        // model components first so they own their keys
        for &(v, l) in substituted.iter().filter(|(_, l)| !l.is_workload()) {
            out.insert(v, l);
        }
        for &(v, l) in &substituted {
            size = size.saturating_mul(v);
            if l.is_workload() {
                out.entry(v).or_insert(l);
            }
        }
        (size, Taint::from_map(out))
    }
}

/// Provenance of one integer value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum Taint {
    #[default]
    Bot,
    Base(TaintLabel),
    Mix(MixMap),
}

impl Taint {
    pub const MC: Taint = Taint::Base(TaintLabel::ModelConfig);
    pub const NT: Taint = Taint::Base(TaintLabel::NumToks);
    pub const NR: Taint = Taint::Base(TaintLabel::NumReqs);

    /// Build a normalized taint from `(value, label)` pairs.
    ///
    /// Zero pairs give `Bot`, one pair gives `Base`.
    pub fn mix<I>(pairs: I) -> Result<Taint, TaintError>
    where
        I: IntoIterator<Item = (u64, TaintLabel)>,
    {
        let mut map = BTreeMap::new();
        for (v, l) in pairs {
            insert_component(&mut map, v, l)?;
        }
        Ok(Self::from_map(map))
    }

    fn from_map(map: BTreeMap<u64, TaintLabel>) -> Taint {
        match map.len() {
            0 => Taint::Bot,
            1 => Taint::Base(*map.values().next().expect("one entry")),
            _ => Taint::Mix(MixMap(map)),
        }
    }

    pub fn is_bot(&self) -> bool {
        matches!(self, Taint::Bot)
    }

    pub fn as_mix(&self) -> Option<&MixMap> {
        match self {
            Taint::Mix(m) => Some(m),
            _ => None,
        }
    }

    /// Set of base labels this taint carries.
    pub fn labels(&self) -> BTreeSet<TaintLabel> {
        match self {
            Taint::Bot => BTreeSet::new(),
            Taint::Base(l) => BTreeSet::from([*l]),
            Taint::Mix(m) => m.iter().map(|(_, l)| l).collect(),
        }
    }

    /// True if any component depends on the request batch.
    pub fn is_workload(&self) -> bool {
        self.labels().iter().any(|l| l.is_workload())
    }
}

fn insert_component(
    map: &mut BTreeMap<u64, TaintLabel>,
    value: u64,
    label: TaintLabel,
) -> Result<(), TaintError> {
    if value == 0 {
        return Err(TaintError::ZeroComponent);
    }
    match map.get(&value) {
        Some(&existing) if existing != label => Err(TaintError::MixValueConflict {
            value,
            first: existing,
            second: label,
        }),
        _ => {
            map.insert(value, label);
            Ok(())
        }
    }
}

/// A concrete value together with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaintedValue {
    pub value: u64,
    pub taint: Taint,
}

impl TaintedValue {
    pub fn new(value: u64, taint: Taint) -> Self {
        Self { value, taint }
    }
}

/// The `⊗` operator.
///
/// Operand values are only consulted when a base label enters a composite
/// (conflict and extend), where they become keys of the component map.
pub fn combine(a: &TaintedValue, b: &TaintedValue) -> Result<Taint, TaintError> {
    use Taint::*;
    match (&a.taint, &b.taint) {
        (Bot, t) | (t, Bot) => Ok(t.clone()),
        (Base(l1), Base(l2)) if l1 == l2 => Ok(Base(*l1)),
        (Base(l1), Base(l2)) => Taint::mix([(a.value, *l1), (b.value, *l2)]),
        (Mix(h), Base(l)) => extend(h, b.value, *l),
        (Base(l), Mix(h)) => extend(h, a.value, *l),
        (Mix(h1), Mix(h2)) => {
            let mut map = h1.0.clone();
            for (v, l) in h2.iter() {
                insert_component(&mut map, v, l)?;
            }
            Ok(Taint::from_map(map))
        }
    }
}

fn extend(h: &MixMap, value: u64, label: TaintLabel) -> Result<Taint, TaintError> {
    let mut map = h.0.clone();
    insert_component(&mut map, value, label)?;
    Ok(Taint::from_map(map))
}

/// Recover one component of a composite, returning it with the residual.
pub fn split(mix: &Taint, known_value: u64) -> Result<(Taint, Taint), TaintError> {
    let m = mix.as_mix().ok_or_else(|| TaintError::NotMix(mix.clone()))?;
    let label = m.get(known_value).ok_or(TaintError::UnknownComponent(known_value))?;
    let mut rest = m.0.clone();
    rest.remove(&known_value);
    Ok((Taint::Base(label), Taint::from_map(rest)))
}

impl fmt::Display for Taint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Taint::Bot => f.write_str("BOT"),
            Taint::Base(l) => f.write_str(l.code()),
            Taint::Mix(m) => {
                f.write_str("MIX{")?;
                for (i, (v, l)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{v}:{l}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl FromStr for Taint {
    type Err = TaintError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TaintError::Parse(s.to_string());
        if s == "BOT" {
            return Ok(Taint::Bot);
        }
        if let Some(l) = TaintLabel::from_code(s) {
            return Ok(Taint::Base(l));
        }
        let body = s
            .strip_prefix("MIX{")
            .and_then(|r| r.strip_suffix('}'))
            .ok_or_else(bad)?;
        let mut map = BTreeMap::new();
        let mut last = 0u64;
        for part in body.split(',') {
            let (v, l) = part.split_once(':').ok_or_else(bad)?;
            // reject leading zeros and signs so the text form stays canonical
            if v.is_empty() || v.starts_with('0') || !v.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let v: u64 = v.parse().map_err(|_| bad())?;
            let l = TaintLabel::from_code(l).ok_or_else(bad)?;
            if v <= last {
                return Err(bad());
            }
            last = v;
            map.insert(v, l);
        }
        if map.len() < 2 {
            return Err(bad());
        }
        Ok(Taint::Mix(MixMap(map)))
    }
}

impl Serialize for Taint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Taint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of [`TaintRegistry::register`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    Inserted,
    Unchanged,
    /// `Bot` taints and the values 0 and 1 are never stored: a unit
    /// dimension cannot be told apart from a broadcast one.
    Ignored,
    /// The value was already known under a different taint.
    AmbiguityDetected(u64),
}

/// Global value → taint map used to resolve inferred dimensions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintRegistry {
    entries: BTreeMap<u64, Taint>,
    collisions: BTreeSet<u64>,
}

impl TaintRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, value: u64, taint: Taint) -> Registration {
        if value <= 1 || taint.is_bot() {
            return Registration::Ignored;
        }
        if self.collisions.contains(&value) {
            return Registration::AmbiguityDetected(value);
        }
        match self.entries.get(&value) {
            None => {
                self.entries.insert(value, taint);
                Registration::Inserted
            }
            Some(t) if *t == taint => Registration::Unchanged,
            Some(_) => {
                self.entries.remove(&value);
                self.collisions.insert(value);
                Registration::AmbiguityDetected(value)
            }
        }
    }

    /// Stored taint; `None` for unknown or collided values.
    pub fn lookup(&self, value: u64) -> Option<&Taint> {
        self.entries.get(&value)
    }

    pub fn entries(&self) -> &BTreeMap<u64, Taint> {
        &self.entries
    }

    pub fn collisions(&self) -> &BTreeSet<u64> {
        &self.collisions
    }

    pub fn contains(&self, value: u64) -> bool {
        self.entries.contains_key(&value) || self.collisions.contains(&value)
    }

    /// Rebuild a registry from serialized parts.
    pub fn from_parts(entries: BTreeMap<u64, Taint>, collisions: BTreeSet<u64>) -> Self {
        Self {
            entries,
            collisions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TaintLabel::*;

    fn tv(v: u64, t: Taint) -> TaintedValue {
        TaintedValue::new(v, t)
    }

    #[test]
    fn absorption_and_preservation() {
        assert_eq!(combine(&tv(1, Taint::Bot), &tv(269, Taint::NT)).unwrap(), Taint::NT);
        assert_eq!(combine(&tv(32, Taint::MC), &tv(128, Taint::MC)).unwrap(), Taint::MC);
    }

    #[test]
    fn conflict_records_values() {
        let t = combine(&tv(269, Taint::NT), &tv(40, Taint::MC)).unwrap();
        assert_eq!(t.to_string(), "MIX{40:MC,269:NT}");
    }

    #[test]
    fn extend_adds_component() {
        let m = Taint::mix([(8, NumReqs), (128, ModelConfig)]).unwrap();
        let t = combine(&tv(1024, m), &tv(64, Taint::NT)).unwrap();
        assert_eq!(t.to_string(), "MIX{8:NR,64:NT,128:MC}");
    }

    #[test]
    fn conflicting_values_rejected() {
        let err = combine(&tv(8, Taint::MC), &tv(8, Taint::NR)).unwrap_err();
        assert!(matches!(err, TaintError::MixValueConflict { value: 8, .. }));
    }

    #[test]
    fn split_recovers_components() {
        let m: Taint = "MIX{40:MC,269:NT}".parse().unwrap();
        assert_eq!(split(&m, 40).unwrap(), (Taint::MC, Taint::NT));
        let m3: Taint = "MIX{2:NR,40:MC,269:NT}".parse().unwrap();
        let (c, r) = split(&m3, 269).unwrap();
        assert_eq!(c, Taint::NT);
        assert_eq!(r.to_string(), "MIX{2:NR,40:MC}");
        assert_eq!(split(&m, 7).unwrap_err(), TaintError::UnknownComponent(7));
    }

    #[test]
    fn reevaluate_substitutes_workload_only() {
        let m: Taint = "MIX{40:MC,269:NT}".parse().unwrap();
        let mix = m.as_mix().unwrap();
        let (size, t) = mix.reevaluate(&BTreeMap::from([(NumToks, 1)]));
        assert_eq!(size, 40);
        assert_eq!(t.to_string(), "MIX{1:NT,40:MC}");
        let (size, _) = mix.reevaluate(&BTreeMap::from([(NumToks, 2048)]));
        assert_eq!(size, 81920);
        let m2 = Taint::mix([(128, ModelConfig), (8, NumReqs)]).unwrap();
        let (size, _) = m2.as_mix().unwrap().reevaluate(&BTreeMap::from([(NumReqs, 64)]));
        assert_eq!(size, 8192);
    }

    #[test]
    fn reevaluate_key_clash_keeps_model_component() {
        let m = Taint::mix([(8, NumReqs), (128, ModelConfig)]).unwrap();
        let (size, t) = m.as_mix().unwrap().reevaluate(&BTreeMap::from([(NumReqs, 128)]));
        assert_eq!(size, 128 * 128);
        assert_eq!(t, Taint::MC);
    }

    #[test]
    fn text_form_roundtrip() {
        for s in ["BOT", "MC", "NT", "NR", "MIX{40:MC,269:NT}", "MIX{2:NR,40:MC,269:NT}"] {
            let t: Taint = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        for bad in ["", "mc", "MIX{}", "MIX{40:MC}", "MIX{269:NT,40:MC}", "MIX{040:MC,2:NT}", "MIX{4:XX,5:NT}"] {
            assert!(bad.parse::<Taint>().is_err(), "{bad}");
        }
    }

    #[test]
    fn registry_semantics() {
        let mut reg = TaintRegistry::new();
        assert_eq!(reg.register(4096, Taint::MC), Registration::Inserted);
        assert_eq!(reg.lookup(4096), Some(&Taint::MC));
        assert_eq!(reg.register(4096, Taint::MC), Registration::Unchanged);
        assert_eq!(reg.lookup(7), None);
        assert_eq!(reg.register(3, Taint::Bot), Registration::Ignored);

        reg.register(8, Taint::MC);
        assert_eq!(reg.register(8, Taint::NR), Registration::AmbiguityDetected(8));
        assert_eq!(reg.lookup(8), None);
        assert!(reg.collisions().contains(&8));
        assert!(!reg.entries().contains_key(&8));
    }
}
