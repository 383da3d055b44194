use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, PoiError};

/// Exactly ten groups, and a primary type to group mapping.
pub const GROUP_COUNT: usize = 10;

/// Maps primary types onto the ten POI groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile")]
pub struct GroupTaxonomy {
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    groups: Vec<String>,
    mapping: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct TaxonomyFile {
    #[serde(default)]
    note: Option<String>,
    groups: Vec<String>,
    mapping: BTreeMap<String, String>,
}

impl TryFrom<TaxonomyFile> for GroupTaxonomy {
    type Error = PoiError;

    fn try_from(f: TaxonomyFile) -> Result<Self, Self::Error> {
        GroupTaxonomy::new(f.groups, f.mapping).map(|mut t| {
            t.note = f.note;
            t
        })
    }
}

const DEFAULT_TAXONOMY: &str = include_str!("../../data/taxonomy.json");

impl GroupTaxonomy {
    pub fn new(groups: Vec<String>, mapping: BTreeMap<String, String>) -> Result<Self, PoiError> {
        if groups.len() != GROUP_COUNT {
            return Err(PoiError::InvalidTaxonomy(format!(
                "expected {GROUP_COUNT} groups, found {}",
                groups.len()
            )));
        }
        let known: HashSet<&str> = groups.iter().map(String::as_str).collect();
        if known.len() != groups.len() {
            return Err(PoiError::InvalidTaxonomy(
                "group names must be distinct".into(),
            ));
        }
        if let Some((ty, g)) = mapping.iter().find(|(_, g)| !known.contains(g.as_str())) {
            return Err(PoiError::InvalidTaxonomy(format!(
                "type `{ty}` maps to unknown group `{g}`"
            )));
        }
        Ok(GroupTaxonomy {
            note: None,
            groups,
            mapping,
        })
    }

    /// The bundled `data/taxonomy.json`.
    pub fn bundled() -> Self {
        serde_json::from_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn load(path: &Path) -> Result<Self, PoiError> {
        read_json(path)
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_of(&self, primary_type: &str) -> Option<&str> {
        self.mapping.get(primary_type).map(String::as_str)
    }

    pub fn primary_types(&self) -> impl Iterator<Item = &str> {
        self.mapping.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_taxonomy_shape() {
        let t = GroupTaxonomy::bundled();
        assert_eq!(t.groups().len(), 10);
        assert_eq!(t.primary_types().count(), 42);
        assert_eq!(t.group_of("bar"), Some("Recreation"));
        assert_eq!(t.group_of("lawyer"), Some("Business"));
        assert_eq!(t.group_of("subway_station"), Some("Transit"));
        assert_eq!(t.group_of("multiple"), Some("Multiple"));
        assert_eq!(t.group_of("bus_station"), None);
        for g in [
            "Business",
            "Food",
            "Recreation",
            "Parking",
            "Transit",
            "Health",
            "Residential",
        ] {
            assert!(t.groups().iter().any(|x| x == g));
        }
    }

    #[test]
    fn rejects_wrong_group_count_and_unknown_targets() {
        let groups: Vec<String> = (0..9).map(|i| format!("g{i}")).collect();
        assert!(GroupTaxonomy::new(groups, BTreeMap::new()).is_err());
        let groups: Vec<String> = (0..10).map(|i| format!("g{i}")).collect();
        let mut mapping = BTreeMap::new();
        mapping.insert("bar".to_string(), "nope".to_string());
        assert!(GroupTaxonomy::new(groups, mapping).is_err());
    }
}
