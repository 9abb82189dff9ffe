//! Slot/value catalog and the dialogue-state data model.
//!
//! Slots are kept in lexicographic order and values in file order, so every
//! index-based lookup (label tables, serialization order) is stable across runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};

pub const NONE_VALUE: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    slots: Vec<String>,
    values: Vec<Vec<String>>,
    slot_index: HashMap<String, usize>,
    value_index: Vec<HashMap<String, usize>>,
}

#[derive(Serialize, Deserialize)]
struct OntologyFile {
    slots: BTreeMap<String, Vec<String>>,
}

impl Ontology {
    /// Builds an ontology from `(slot, values)` pairs. A missing "none" is
    /// appended to each value list.
    pub fn new<I, S, V>(slots: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<V>)>,
        S: Into<String>,
        V: Into<String>,
    {
        let mut entries: Vec<(String, Vec<String>)> = Vec::new();
        let mut seen = HashSet::new();
        for (slot, vals) in slots {
            let slot = slot.into();
            if slot.is_empty() {
                return Err(DstError::Ontology("empty slot name".into()));
            }
            if !seen.insert(slot.clone()) {
                return Err(DstError::Ontology(format!("duplicate slot `{slot}`")));
            }
            let mut vals: Vec<String> = vals.into_iter().map(Into::into).collect();
            if vals.is_empty() {
                return Err(DstError::Ontology(format!("slot `{slot}` has an empty value list")));
            }
            let mut uniq = HashSet::new();
            for v in &vals {
                if !uniq.insert(v.as_str()) {
                    return Err(DstError::Ontology(format!(
                        "slot `{slot}` lists value `{v}` twice"
                    )));
                }
            }
            if !vals.iter().any(|v| v == NONE_VALUE) {
                vals.push(NONE_VALUE.to_string());
            }
            entries.push((slot, vals));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let slot_index = entries
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (s.clone(), i))
            .collect();
        let value_index = entries
            .iter()
            .map(|(_, vs)| vs.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect())
            .collect();
        let (slots, values) = entries.into_iter().unzip();
        Ok(Self {
            slots,
            values,
            slot_index,
            value_index,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        // Duplicate keys are invisible after a map parse, so check the raw
        // object first.
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DstError::parse("ontology JSON", e))?;
        let slots = raw
            .get("slots")
            .ok_or_else(|| DstError::parse("ontology JSON", "missing `slots` object"))?;
        if !slots.is_object() {
            return Err(DstError::parse("ontology JSON", "`slots` must be an object"));
        }
        let entries = parse_slot_entries(text)?;
        Self::new(entries)
    }

    pub fn to_json_string(&self) -> String {
        let file = OntologyFile {
            slots: self
                .slots
                .iter()
                .cloned()
                .zip(self.values.iter().cloned())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("ontology serializes")
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn values(&self, slot: usize) -> &[String] {
        &self.values[slot]
    }

    pub fn slot_index(&self, slot: &str) -> Option<usize> {
        self.slot_index.get(slot).copied()
    }

    pub fn value_index(&self, slot: usize, value: &str) -> Option<usize> {
        self.value_index[slot].get(value).copied()
    }

    pub fn none_index(&self, slot: usize) -> usize {
        self.value_index[slot][NONE_VALUE]
    }

    pub fn contains(&self, slot: &str, value: &str) -> bool {
        self.slot_index(slot)
            .map(|i| self.value_index[i].contains_key(value))
            .unwrap_or(false)
    }
}

/// Reads `"slots": { ... }` preserving duplicates, which a map-based parse
/// would silently merge.
fn parse_slot_entries(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    use serde::de::{Deserializer, MapAccess, Visitor};

    struct Entries(Vec<(String, Vec<String>)>);

    impl<'de> Deserialize<'de> for Entries {
        fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
            struct V;
            impl<'de> Visitor<'de> for V {
                type Value = Entries;
                fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                    f.write_str("an object of slot -> value list")
                }
                fn visit_map<A: MapAccess<'de>>(
                    self,
                    mut map: A,
                ) -> std::result::Result<Entries, A::Error> {
                    let mut out = Vec::new();
                    while let Some((k, v)) = map.next_entry::<String, Vec<String>>()? {
                        out.push((k, v));
                    }
                    Ok(Entries(out))
                }
            }
            d.deserialize_map(V)
        }
    }

    #[derive(Deserialize)]
    struct Top {
        slots: Entries,
    }

    let top: Top = serde_json::from_str(text).map_err(|e| DstError::parse("ontology JSON", e))?;
    Ok(top.slots.0)
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    Ontology::from_json_str(&text)
}

/// A total slot -> value map. Inactive slots hold [`NONE_VALUE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct DialogueState {
    assignments: BTreeMap<String, String>,
}

impl DialogueState {
    /// All slots set to "none".
    pub fn empty(ontology: &Ontology) -> Self {
        Self {
            assignments: ontology
                .slots()
                .iter()
                .map(|s| (s.clone(), NONE_VALUE.to_string()))
                .collect(),
        }
    }

    /// Totalizes a sparse map; absent slots become "none". Entries are not
    /// checked here, see [`validate_state`].
    pub fn from_sparse(sparse: &BTreeMap<String, String>, ontology: &Ontology) -> Self {
        let mut state = Self::empty(ontology);
        for (k, v) in sparse {
            state.assignments.insert(k.clone(), v.clone());
        }
        state
    }

    /// Wraps a raw map verbatim, without totalizing.
    pub fn from_raw(assignments: BTreeMap<String, String>) -> Self {
        Self { assignments }
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.assignments.get(slot).map(String::as_str)
    }

    pub fn set(&mut self, slot: impl Into<String>, value: impl Into<String>) {
        self.assignments.insert(slot.into(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.assignments.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Active (non-"none") entries only, the on-disk form.
    pub fn to_sparse(&self) -> BTreeMap<String, String> {
        self.assignments
            .iter()
            .filter(|(_, v)| v.as_str() != NONE_VALUE)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn active_slots(&self) -> Vec<String> {
        active_slots(self)
    }
}

/// Slots whose value is not "none", sorted lexicographically.
pub fn active_slots(state: &DialogueState) -> Vec<String> {
    // BTreeMap iteration is already sorted.
    state
        .assignments
        .iter()
        .filter(|(_, v)| v.as_str() != NONE_VALUE)
        .map(|(k, _)| k.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateViolation {
    UnknownSlot { slot: String },
    UnknownValue { slot: String, value: String },
    SlotAbsent { slot: String },
}

impl fmt::Display for StateViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateViolation::UnknownSlot { slot } => write!(f, "slot `{slot}` not in ontology"),
            StateViolation::UnknownValue { slot, value } => {
                write!(f, "value `{value}` not a candidate of slot `{slot}`")
            }
            StateViolation::SlotAbsent { slot } => write!(f, "slot absent: `{slot}`"),
        }
    }
}

/// Lists every problem with `state`; an empty report means the state is valid.
pub fn validate_state(state: &DialogueState, ontology: &Ontology) -> Vec<StateViolation> {
    let mut report = Vec::new();
    for (slot, value) in state.iter() {
        match ontology.slot_index(slot) {
            None => report.push(StateViolation::UnknownSlot { slot: slot.into() }),
            Some(j) if ontology.value_index(j, value).is_none() => {
                report.push(StateViolation::UnknownValue {
                    slot: slot.into(),
                    value: value.into(),
                })
            }
            Some(_) => {}
        }
    }
    for slot in ontology.slots() {
        if state.get(slot).is_none() {
            report.push(StateViolation::SlotAbsent { slot: slot.clone() });
        }
    }
    report
}
