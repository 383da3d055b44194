//! Point-of-interest catalog: acquisition from a Places-style API, primary
//! types, manual additions, buffer rings, duplicate merging and grouping.

mod client;
mod harvest;
mod normalize;
mod taxonomy;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, SpatialIndex};

#[cfg(feature = "live")]
pub use client::HttpPlacesClient;
pub use client::{
    ClientError, FixtureClient, InventoryClient, InventoryPlace, LatLng, PlaceGeometry,
    PlaceResult, PlacesClient, PlacesRequest, PlacesResponse, RecordingClient,
};
pub use harvest::{
    fetch, fetch_nearby, fetch_text, harvest, harvest_cells, select_low_density_cells, Fetched,
    HarvestFailure, HarvestOptions, HarvestOutcome, HarvestReport, PlanEntry, QueryBudget,
    TruncatedQuery, MAX_RESULTS_PER_QUERY,
};
pub use normalize::{
    add_manual_pois, assign_groups, assign_primary, dedupe_and_merge, dedupe_and_merge_with,
    exclude_primary_types, generate_buffers, normalize, BufferRing, BufferSpec, ManualPoi,
    MergeOptions, MergeReport, NormalizeOptions, NormalizeReport, TargetSelector,
};
pub use taxonomy::GroupTaxonomy;

/// Primary type given to a POI built from several colocated places with
/// different primary types.
pub const MULTIPLE: &str = "multiple";

#[derive(Debug, Error)]
pub enum PoiError {
    #[error("query budget exhausted after {used} of {max} queries")]
    BudgetExhausted { used: u64, max: u64 },
    #[error("places client: {0}")]
    Client(#[from] ClientError),
    #[error("nearby result `{place_id}` has no predefined types")]
    MissingTypes { place_id: String },
    #[error("buffer target {0} not found in catalog")]
    TargetNotFound(TargetSelector),
    #[error("invalid buffer spec: {0}")]
    InvalidBufferSpec(String),
    #[error("primary type `{0}` has no group in the taxonomy")]
    UnmappedPrimaryType(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("duplicate POI id `{0}`")]
    DuplicateId(String),
    #[error("invalid manual POI `{name}`: {source}")]
    InvalidManualPoi { name: String, source: GeoError },
    #[error("query plan is empty")]
    EmptyPlan,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Nearby,
    Text,
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Nearby => "nearby",
            QueryKind::Text => "text",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoiSource {
    Nearby,
    Text,
    Manual,
    Buffer,
    Merged,
}

impl From<QueryKind> for PoiSource {
    fn from(k: QueryKind) -> Self {
        match k {
            QueryKind::Nearby => PoiSource::Nearby,
            QueryKind::Text => PoiSource::Text,
        }
    }
}

/// A place as returned by one search, tagged with the query that found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPoi {
    pub place_id: String,
    pub name: String,
    pub position: GeoPoint,
    pub predefined_types: Vec<String>,
    pub vicinity: String,
    pub query_type: String,
    pub source: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub name: String,
    pub position: GeoPoint,
    pub predefined_types: Vec<String>,
    pub primary_type: String,
    #[serde(default)]
    pub group: Option<String>,
    pub source: PoiSource,
    #[serde(default)]
    pub parent_id: Option<String>,
    /// Primary types of every place folded into a merged POI, duplicates kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merged_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vicinity: Option<String>,
}

/// An id-indexed POI list. Serializes as a plain JSON array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Poi>", into = "Vec<Poi>")]
pub struct Catalog {
    pois: Vec<Poi>,
    #[serde(skip)]
    by_id: HashMap<String, usize>,
}

impl TryFrom<Vec<Poi>> for Catalog {
    type Error = PoiError;

    fn try_from(pois: Vec<Poi>) -> Result<Self, Self::Error> {
        Catalog::new(pois)
    }
}

impl From<Catalog> for Vec<Poi> {
    fn from(c: Catalog) -> Self {
        c.pois
    }
}

impl Catalog {
    pub fn new(pois: Vec<Poi>) -> Result<Self, PoiError> {
        let mut by_id = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(PoiError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Catalog { pois, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Poi> {
        self.by_id.get(id).map(|&i| &self.pois[i])
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn into_pois(self) -> Vec<Poi> {
        self.pois
    }

    pub fn group_of(&self, id: &str) -> Option<&str> {
        self.get(id).and_then(|p| p.group.as_deref())
    }

    pub fn spatial_index(&self) -> SpatialIndex<String> {
        SpatialIndex::build(
            self.pois
                .iter()
                .map(|p| (p.id.clone(), p.position))
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, PoiError> {
        read_json(path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.pois).expect("POIs serialize")
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PoiError> {
    let text = std::fs::read_to_string(path).map_err(|source| PoiError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PoiError::Json {
        path: path.display().to_string(),
        source,
    })
}


#[cfg(test)]
mod tests {
    use super::test_support::poi;
    use super::*;

    #[test]
    fn catalog_rejects_duplicate_ids_and_round_trips() {
        let a = poi("a", 33.77, -84.39, "bar");
        assert!(matches!(
            Catalog::new(vec![a.clone(), a.clone()]),
            Err(PoiError::DuplicateId(_))
        ));
        let cat = Catalog::new(vec![a.clone(), poi("b", 33.78, -84.38, "cafe")]).unwrap();
        let json = cat.to_json();
        assert!(json.trim_start().starts_with('['));
        let back: Catalog = serde_json::from_str(&json).unwrap();
        assert_eq!(back.get("b").unwrap().primary_type, "cafe");
        assert_eq!(back, cat);
    }
}
