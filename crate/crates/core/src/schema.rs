//! Fine-label vocabulary: mutually exclusive groups, gated groups and
//! independent binary indicators.
//!
//! Schemas are data. The tennis schema ships embedded; others load from a
//! TOML file with this grammar:
//!
//! ```toml
//! classes = ["near", "far", "serve", ...]   # index = position
//! groups = [[0, 1], [2, 3, 4]]              # exactly one active, always
//! independent_binary = [13]                 # free 0/1 indicators
//!
//! [[conditional_groups]]                    # exactly one active when
//! gate_index = 2                            # v[gate_index] == gate_value,
//! gate_value = 0                            # all zero otherwise
//! members = [5, 6]
//! ```
//!
//! A gate index must belong to an unconditional group or be an independent
//! binary, so that it is decided before the groups it controls.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The embedded default schema.
pub const TENNIS_SCHEMA_TOML: &str = include_str!("../schemas/tennis.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionalGroup {
    pub gate_index: usize,
    pub gate_value: u8,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub classes: Vec<String>,
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub conditional_groups: Vec<ConditionalGroup>,
    #[serde(default)]
    pub independent_binary: Vec<usize>,
}

/// One unit of mutual exclusivity, used for confidence estimation and
/// post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupRef<'a> {
    Exclusive(&'a [usize]),
    Conditional(&'a ConditionalGroup),
    Binary(usize),
}

impl LabelSchema {
    pub fn new(
        classes: Vec<String>,
        groups: Vec<Vec<usize>>,
        conditional_groups: Vec<ConditionalGroup>,
        independent_binary: Vec<usize>,
    ) -> Result<Self> {
        let schema = Self {
            classes,
            groups,
            conditional_groups,
            independent_binary,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn tennis() -> Self {
        Self::from_toml_str(TENNIS_SCHEMA_TOML).expect("embedded tennis schema is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: LabelSchema =
            toml::from_str(text).map_err(|e| Error::Schema(format!("parse: {e}")))?;
        schema.check()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex_digest(&canonical)
    }

    /// Groups in confidence/post-processing order: unconditional groups,
    /// conditional groups, then each independent binary.
    pub fn group_refs(&self) -> Vec<GroupRef<'_>> {
        let mut out: Vec<GroupRef<'_>> = self.groups.iter().map(|g| GroupRef::Exclusive(g)).collect();
        out.extend(self.conditional_groups.iter().map(GroupRef::Conditional));
        out.extend(self.independent_binary.iter().map(|&i| GroupRef::Binary(i)));
        out
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len() + self.conditional_groups.len() + self.independent_binary.len()
    }

    fn check(&self) -> Result<()> {
        let c = self.classes.len();
        if c == 0 {
            return Err(Error::Schema("no classes".into()));
        }
        let mut owner = vec![0usize; c];
        let mut mark = |idxs: &[usize], what: &str| -> Result<()> {
            if idxs.is_empty() {
                return Err(Error::Schema(format!("empty {what}")));
            }
            for &i in idxs {
                if i >= c {
                    return Err(Error::Schema(format!("{what} index {i} out of bounds (C={c})")));
                }
                owner[i] += 1;
            }
            Ok(())
        };
        for g in &self.groups {
            mark(g, "group")?;
        }
        for g in &self.conditional_groups {
            mark(&g.members, "conditional group")?;
        }
        for &b in &self.independent_binary {
            mark(&[b], "independent binary")?;
        }
        if let Some(i) = owner.iter().position(|&n| n != 1) {
            return Err(Error::Schema(format!(
                "class index {i} must belong to exactly one group (found {})",
                owner[i]
            )));
        }
        for g in &self.conditional_groups {
            if g.gate_value > 1 {
                return Err(Error::Schema(format!("gate value {} is not binary", g.gate_value)));
            }
            let decided_first = g.gate_index < c
                && (self.groups.iter().any(|u| u.contains(&g.gate_index))
                    || self.independent_binary.contains(&g.gate_index));
            if !decided_first {
                return Err(Error::Schema(format!(
                    "gate index {} must be in an unconditional group or an independent binary",
                    g.gate_index
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn is_one(x: f64) -> bool {
    x == 1.0
}

/// True iff `v` is a binary vector satisfying every group and gate rule.
pub fn validate_hard_vector(v: &[f64], s: &LabelSchema) -> Result<bool> {
    if v.len() != s.num_classes() {
        return Err(Error::Schema(format!(
            "vector length {} does not match schema C={}",
            v.len(),
            s.num_classes()
        )));
    }
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Ok(false);
    }
    let active = |g: &[usize]| g.iter().filter(|&&i| is_one(v[i])).count();
    if s.groups.iter().any(|g| active(g) != 1) {
        return Ok(false);
    }
    for g in &s.conditional_groups {
        let gate_open = v[g.gate_index] == f64::from(g.gate_value);
        let want = usize::from(gate_open);
        if active(&g.members) != want {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Sorted enumeration of every schema-valid hard vector, with a reverse
/// index for tokenizing frame labels into event classes.
#[derive(Debug, Clone)]
pub struct EventVocab {
    entries: Vec<Vec<u8>>,
    names: Vec<String>,
    index: HashMap<Vec<u8>, usize>,
}

impl EventVocab {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bits(&self, id: usize) -> &[u8] {
        &self.entries[id]
    }

    pub fn vector(&self, id: usize) -> Vec<f64> {
        self.entries[id].iter().map(|&b| f64::from(b)).collect()
    }

    /// Active class names joined with `_`, e.g. `near_return_bh_gs`.
    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn index_of_bits(&self, bits: &[u8]) -> Option<usize> {
        self.index.get(bits).copied()
    }

    pub fn index_of(&self, v: &[f64]) -> Option<usize> {
        if v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return None;
        }
        let bits: Vec<u8> = v.iter().map(|&x| u8::from(x == 1.0)).collect();
        self.index_of_bits(&bits)
    }
}

pub fn event_vocab(s: &LabelSchema) -> EventVocab {
    let c = s.num_classes();
    // Base choices: one member per unconditional group, 0/1 per binary.
    let mut partial: Vec<Vec<u8>> = vec![vec![0; c]];
    for g in &s.groups {
        partial = partial
            .into_iter()
            .flat_map(|v| {
                g.iter().map(move |&i| {
                    let mut w = v.clone();
                    w[i] = 1;
                    w
                })
            })
            .collect();
    }
    for &b in &s.independent_binary {
        partial = partial
            .into_iter()
            .flat_map(|v| {
                let mut on = v.clone();
                on[b] = 1;
                [v, on]
            })
            .collect();
    }
    // Gates only read unconditional entries, so conditional groups expand
    // independently of each other.
    for g in &s.conditional_groups {
        partial = partial
            .into_iter()
            .flat_map(|v| {
                if v[g.gate_index] == g.gate_value {
                    g.members
                        .iter()
                        .map(|&i| {
                            let mut w = v.clone();
                            w[i] = 1;
                            w
                        })
                        .collect::<Vec<_>>()
                } else {
                    vec![v]
                }
            })
            .collect();
    }
    partial.sort();
    partial.dedup();
    let names = partial
        .iter()
        .map(|bits| {
            let parts: Vec<&str> = bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1)
                .map(|(i, _)| s.classes[i].as_str())
                .collect();
            if parts.is_empty() {
                "none".to_string()
            } else {
                parts.join("_")
            }
        })
        .collect();
    let index = partial.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
    EventVocab {
        entries: partial,
        names,
        index,
    }
}
