//! Attribute slots and the vocabulary used to decorate objects.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeeError};

/// One of the three attribute slots, in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Size,
    Color,
    Material,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Size, Slot::Color, Slot::Material];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Size => "size",
            Slot::Color => "color",
            Slot::Material => "material",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slot to value. Iteration order is always size, color, material.
pub type AttributeMap = BTreeMap<Slot, String>;

/// The three value lists for size, color and material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeVocabulary {
    pub size: Vec<String>,
    pub color: Vec<String>,
    pub material: Vec<String>,
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        let owned = |xs: [&str; 3]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            size: owned(["small", "medium", "large"]),
            color: owned(["red", "green", "blue"]),
            material: owned(["wooden", "rubber", "metallic"]),
        }
    }
}

impl AttributeVocabulary {
    pub fn values(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Size => &self.size,
            Slot::Color => &self.color,
            Slot::Material => &self.material,
        }
    }

    /// Each slot holds exactly three distinct, non-empty, hyphen-free,
    /// lowercase values, and no value appears in two slots.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for slot in Slot::ALL {
            let values = self.values(slot);
            if values.len() != 3 {
                return Err(SeeError::InvalidVocabulary(format!(
                    "slot `{slot}` has {} values, expected 3",
                    values.len()
                )));
            }
            for v in values {
                if v.is_empty() || v.contains('-') || v.trim() != v || v.to_lowercase() != *v {
                    return Err(SeeError::InvalidVocabulary(format!(
                        "value `{v}` in slot `{slot}` must be lowercase, trimmed and hyphen-free"
                    )));
                }
                if v.contains(' ') {
                    return Err(SeeError::InvalidVocabulary(format!(
                        "value `{v}` in slot `{slot}` must be a single token"
                    )));
                }
                if !seen.insert(v.as_str()) {
                    return Err(SeeError::InvalidVocabulary(format!(
                        "value `{v}` appears more than once"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn slot_of(&self, value: &str) -> Option<Slot> {
        Slot::ALL
            .into_iter()
            .find(|&slot| self.values(slot).iter().any(|v| v == value))
    }

    fn value_index(&self, slot: Slot, value: &str) -> Option<usize> {
        self.values(slot).iter().position(|v| v == value)
    }

    /// Every attribute combination including the empty one, in canonical
    /// order: by arity, then lexically by (slot, vocabulary position) pairs.
    ///
    /// For the default vocabulary the arity-2 block therefore runs
    /// "small red", "small green", "small blue", "small wooden", ... and
    /// ends with "blue metallic".
    pub fn combinations(&self) -> Vec<AttributeMap> {
        let mut keyed: Vec<(usize, Vec<(usize, usize)>, AttributeMap)> = Vec::with_capacity(64);
        let (ns, nc, nm) = (self.size.len(), self.color.len(), self.material.len());
        for s in 0..=ns {
            for c in 0..=nc {
                for m in 0..=nm {
                    let mut map = AttributeMap::new();
                    let mut key = Vec::new();
                    for (slot, pick) in [(Slot::Size, s), (Slot::Color, c), (Slot::Material, m)] {
                        if pick > 0 {
                            map.insert(slot, self.values(slot)[pick - 1].clone());
                            key.push((slot.index(), pick - 1));
                        }
                    }
                    keyed.push((key.len(), key, map));
                }
            }
        }
        keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        keyed.into_iter().map(|(_, _, map)| map).collect()
    }

    /// Checks that every value in `attrs` belongs to its slot.
    pub fn check(&self, attrs: &AttributeMap) -> Result<()> {
        for (&slot, value) in attrs {
            if self.value_index(slot, value).is_none() {
                return Err(SeeError::Contract(format!(
                    "`{value}` is not a {slot} value of the vocabulary"
                )));
            }
        }
        Ok(())
    }

    /// Splits a phrase such as "small red wooden car" into its attribute
    /// map and the remaining object phrase. Attribute tokens must lead the
    /// phrase, in slot order, each slot at most once.
    pub fn split_phrase<'a>(&self, phrase: &'a str) -> (AttributeMap, &'a str) {
        let mut attrs = AttributeMap::new();
        let mut rest = phrase.trim_start();
        let mut last: Option<Slot> = None;
        while let Some((token, tail)) = rest.split_once(' ') {
            match self.slot_of(token) {
                Some(slot) if last.is_none_or(|prev| prev < slot) => {
                    attrs.insert(slot, token.to_string());
                    last = Some(slot);
                    rest = tail.trim_start();
                }
                _ => break,
            }
        }
        (attrs, rest)
    }
}

/// "small red wooden" + "car" -> "small red wooden car".
pub fn compose_phrase(attrs: &AttributeMap, object: &str) -> String {
    let mut out = String::new();
    for value in attrs.values() {
        out.push_str(value);
        out.push(' ');
    }
    out.push_str(object);
    out
}

/// Number of slot additions, deletions and substitutions turning `a` into `b`.
pub fn slot_edits(a: &AttributeMap, b: &AttributeMap) -> u32 {
    Slot::ALL
        .into_iter()
        .filter(|slot| a.get(slot) != b.get(slot))
        .count() as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocabulary_is_valid() {
        AttributeVocabulary::default().validate().unwrap();
    }

    #[test]
    fn rejects_short_slot() {
        let mut v = AttributeVocabulary::default();
        v.color.pop();
        assert!(matches!(v.validate(), Err(SeeError::InvalidVocabulary(_))));
    }

    #[test]
    fn rejects_duplicate_and_hyphenated() {
        let mut v = AttributeVocabulary::default();
        v.color[2] = "red".into();
        assert!(v.validate().is_err());
        let mut v = AttributeVocabulary::default();
        v.material[0] = "semi-gloss".into();
        assert!(v.validate().is_err());
    }

    #[test]
    fn combinations_arity_counts() {
        let combos = AttributeVocabulary::default().combinations();
        assert_eq!(combos.len(), 64);
        let mut counts = [0usize; 4];
        for c in &combos {
            counts[c.len()] += 1;
        }
        assert_eq!(counts, [1, 9, 27, 27]);
        assert!(combos[0].is_empty());
    }

    #[test]
    fn canonical_order_head() {
        let vocab = AttributeVocabulary::default();
        let phrases: Vec<String> = vocab
            .combinations()
            .iter()
            .skip(1)
            .take(16)
            .map(|a| compose_phrase(a, "cup"))
            .collect();
        assert_eq!(
            phrases,
            [
                "small cup", "medium cup", "large cup", "red cup", "green cup", "blue cup",
                "wooden cup", "rubber cup", "metallic cup", "small red cup", "small green cup",
                "small blue cup", "small wooden cup", "small rubber cup", "small metallic cup",
                "medium red cup",
            ]
        );
    }

    #[test]
    fn split_phrase_recovers_attributes() {
        let vocab = AttributeVocabulary::default();
        let (attrs, rest) = vocab.split_phrase("large blue metallic refrigerator");
        assert_eq!(rest, "refrigerator");
        assert_eq!(attrs.get(&Slot::Size).map(String::as_str), Some("large"));
        assert_eq!(attrs.len(), 3);

        let (attrs, rest) = vocab.split_phrase("tv remote");
        assert!(attrs.is_empty());
        assert_eq!(rest, "tv remote");

        // out-of-order attributes are left in the object phrase
        let (attrs, rest) = vocab.split_phrase("red small car");
        assert_eq!(attrs.len(), 1);
        assert_eq!(rest, "small car");
    }

    #[test]
    fn slot_edits_counts_each_slot_once() {
        let vocab = AttributeVocabulary::default();
        let (a, _) = vocab.split_phrase("small red wooden car");
        let (b, _) = vocab.split_phrase("large blue car");
        assert_eq!(slot_edits(&a, &b), 3);
        assert_eq!(slot_edits(&a, &a), 0);
    }
}
