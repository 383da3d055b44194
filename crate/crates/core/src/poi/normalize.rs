//! Raw search results to a grouped catalog.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::taxonomy::GroupTaxonomy;
use super::{Catalog, Poi, PoiError, PoiSource, QueryKind, RawPoi, MULTIPLE};
use crate::geo::{offset_azimuthal, GeoPoint};

/// Nearby results take their first predefined type. Text results take the
/// query type, which is put at the front of their type list.
pub fn assign_primary(raw: RawPoi) -> Result<Poi, PoiError> {
    let (primary, types) =
        match raw.source {
            QueryKind::Nearby => {
                let first = raw.predefined_types.first().cloned().ok_or_else(|| {
                    PoiError::MissingTypes {
                        place_id: raw.place_id.clone(),
                    }
                })?;
                (first, raw.predefined_types)
            }
            QueryKind::Text => {
                let mut types = Vec::with_capacity(raw.predefined_types.len() + 1);
                types.push(raw.query_type.clone());
                types.extend(
                    raw.predefined_types
                        .into_iter()
                        .filter(|t| *t != raw.query_type),
                );
                (raw.query_type.clone(), types)
            }
        };
    Ok(Poi {
        id: format!("{}:{}:{}", raw.source, raw.query_type, raw.place_id),
        name: raw.name,
        position: raw.position,
        predefined_types: types,
        primary_type: primary,
        group: None,
        source: raw.source.into(),
        parent_id: None,
        merged_types: vec![],
        place_id: Some(raw.place_id),
        query_type: Some(raw.query_type),
        vicinity: Some(raw.vicinity),
    })
}

pub fn exclude_primary_types(pois: Vec<Poi>, excluded: &[String]) -> (Vec<Poi>, usize) {
    let before = pois.len();
    let kept: Vec<Poi> = pois
        .into_iter()
        .filter(|p| !excluded.contains(&p.primary_type))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// A hand-entered POI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualPoi {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub primary_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predefined_types: Vec<String>,
}

fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

pub fn add_manual_pois(mut pois: Vec<Poi>, entries: &[ManualPoi]) -> Result<Vec<Poi>, PoiError> {
    for e in entries {
        let position =
            GeoPoint::new(e.lat, e.lon).map_err(|source| PoiError::InvalidManualPoi {
                name: e.name.clone(),
                source,
            })?;
        let mut types = vec![e.primary_type.clone()];
        for t in &e.predefined_types {
            if !types.contains(t) {
                types.push(t.clone());
            }
        }
        pois.push(Poi {
            id: e
                .id
                .clone()
                .unwrap_or_else(|| format!("manual:{}", slug(&e.name))),
            name: e.name.clone(),
            position,
            predefined_types: types,
            primary_type: e.primary_type.clone(),
            group: None,
            source: PoiSource::Manual,
            parent_id: None,
            merged_types: vec![],
            place_id: None,
            query_type: None,
            vicinity: None,
        });
    }
    Ok(pois)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    Id(String),
    /// Case-insensitive full name; a merged POI matches on any of its parts.
    Name(String),
    PrimaryType(String),
}

impl fmt::Display for TargetSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSelector::Id(v) => write!(f, "id `{v}`"),
            TargetSelector::Name(v) => write!(f, "name `{v}`"),
            TargetSelector::PrimaryType(v) => write!(f, "primary type `{v}`"),
        }
    }
}

impl TargetSelector {
    pub fn matches(&self, poi: &Poi) -> bool {
        match self {
            TargetSelector::Id(id) => poi.id == *id,
            TargetSelector::Name(name) => {
                poi.name.eq_ignore_ascii_case(name)
                    || (poi.source == PoiSource::Merged
                        && poi.name.split(" / ").any(|n| n.eq_ignore_ascii_case(name)))
            }
            TargetSelector::PrimaryType(t) => poi.primary_type == *t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferRing {
    pub count: u32,
    pub radius_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub target: TargetSelector,
    pub count: u32,
    pub radius_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring2: Option<BufferRing>,
}

impl BufferSpec {
    fn rings(&self) -> Vec<BufferRing> {
        let mut rings = vec![BufferRing {
            count: self.count,
            radius_m: self.radius_m,
        }];
        rings.extend(self.ring2);
        rings
    }
}

fn check_ring(spec: &BufferSpec, ring: &BufferRing) -> Result<(), PoiError> {
    if ring.count == 0 || !(ring.radius_m > 0.0 && ring.radius_m <= 10_000.0) {
        return Err(PoiError::InvalidBufferSpec(format!(
            "{}: {} buffers at {} m",
            spec.target, ring.count, ring.radius_m
        )));
    }
    Ok(())
}

/// Rings buffer POIs around every POI each spec selects. The first ring
/// starts due north; the second is rotated by half its own spacing.
/// A POI selected by several specs only gets the first one's buffers.
pub fn generate_buffers(
    mut pois: Vec<Poi>,
    specs: &[BufferSpec],
) -> Result<(Vec<Poi>, usize), PoiError> {
    let mut buffered: HashSet<usize> = HashSet::new();
    let mut added = Vec::new();
    for spec in specs {
        for ring in spec.rings() {
            check_ring(spec, &ring)?;
        }
        let targets: Vec<usize> = pois
            .iter()
            .enumerate()
            .filter(|(_, p)| p.source != PoiSource::Buffer && spec.target.matches(p))
            .map(|(i, _)| i)
            .collect();
        if targets.is_empty() {
            return Err(PoiError::TargetNotFound(spec.target.clone()));
        }
        for i in targets {
            if !buffered.insert(i) {
                log::warn!(
                    "`{}` already buffered; ignoring {}",
                    pois[i].id,
                    spec.target
                );
                continue;
            }
            let parent = &pois[i];
            for (r, ring) in spec.rings().iter().enumerate() {
                let step = 360.0 / ring.count as f64;
                let start = if r == 0 { 0.0 } else { step / 2.0 };
                for k in 0..ring.count {
                    let bearing = start + step * k as f64;
                    added.push(Poi {
                        id: format!("{}~{}.{k}", parent.id, r + 1),
                        position: offset_azimuthal(parent.position, bearing, ring.radius_m),
                        source: PoiSource::Buffer,
                        parent_id: Some(parent.id.clone()),
                        place_id: None,
                        query_type: None,
                        ..parent.clone()
                    });
                }
            }
        }
    }
    let n = added.len();
    pois.extend(added);
    Ok((pois, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeOptions {
    /// Vicinity values too vague to place a POI, compared case-insensitively.
    pub vague_vicinities: Vec<String>,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            vague_vicinities: vec!["Atlanta".to_string()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub input: usize,
    /// Same place found again by the same query (neighboring cells overlap).
    pub repeated: usize,
    /// Copies of a place found under a query type other than its own.
    pub cross_type_duplicates: usize,
    pub vague_vicinity: usize,
    /// Locations that held more than one POI.
    pub colocated_groups: usize,
    pub colocated_inputs: usize,
    pub multiple: usize,
    pub output: usize,
}

pub fn dedupe_and_merge(pois: Vec<Poi>) -> (Vec<Poi>, MergeReport) {
    dedupe_and_merge_with(pois, &MergeOptions::default())
}

pub fn dedupe_and_merge_with(pois: Vec<Poi>, options: &MergeOptions) -> (Vec<Poi>, MergeReport) {
    let mut report = MergeReport {
        input: pois.len(),
        ..Default::default()
    };

    let mut seen = HashSet::new();
    let pois: Vec<Poi> = pois
        .into_iter()
        .filter(|p| seen.insert(p.id.clone()))
        .collect();
    report.repeated = report.input - pois.len();

    let pois = drop_cross_type_copies(pois, &mut report);

    let before = pois.len();
    let pois: Vec<Poi> = pois
        .into_iter()
        .filter(|p| {
            !p.vicinity.as_deref().is_some_and(|v| {
                options
                    .vague_vicinities
                    .iter()
                    .any(|x| x.eq_ignore_ascii_case(v.trim()))
            })
        })
        .collect();
    report.vague_vicinity = before - pois.len();

    let mut slots: Vec<Vec<Poi>> = Vec::new();
    let mut by_key: HashMap<(i64, i64), usize> = HashMap::new();
    for p in pois {
        match by_key.entry(p.position.location_key()) {
            std::collections::hash_map::Entry::Occupied(e) => slots[*e.get()].push(p),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(slots.len());
                slots.push(vec![p]);
            }
        }
    }
    let out: Vec<Poi> = slots
        .into_iter()
        .map(|group| {
            if group.len() == 1 {
                return group.into_iter().next().unwrap();
            }
            report.colocated_groups += 1;
            report.colocated_inputs += group.len();
            let merged = merge_group(group);
            if merged.primary_type == MULTIPLE {
                report.multiple += 1;
            }
            merged
        })
        .collect();
    report.output = out.len();
    (out, report)
}

/// Keeps, per place_id, the copy found by querying the place's own first
/// type. When no copy qualifies the first one is kept.
fn drop_cross_type_copies(pois: Vec<Poi>, report: &mut MergeReport) -> Vec<Poi> {
    let mut copies: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, p) in pois.iter().enumerate() {
        if let Some(pid) = p.place_id.as_deref() {
            copies.entry(pid).or_default().push(i);
        }
    }
    let mut drop = vec![false; pois.len()];
    for idx in copies.values().filter(|v| v.len() > 1) {
        // Text copies had their query type prepended, so the native first
        // type comes from a nearby copy when there is one.
        let native = idx
            .iter()
            .map(|&i| &pois[i])
            .find(|p| p.source == PoiSource::Nearby)
            .and_then(|p| p.predefined_types.first());
        let keep = native
            .and_then(|t| {
                idx.iter()
                    .copied()
                    .find(|&i| pois[i].query_type.as_ref() == Some(t))
            })
            .unwrap_or(idx[0]);
        for &i in idx {
            if i != keep {
                drop[i] = true;
            }
        }
    }
    report.cross_type_duplicates = drop.iter().filter(|d| **d).count();
    pois.into_iter()
        .zip(drop)
        .filter(|(_, d)| !d)
        .map(|(p, _)| p)
        .collect()
}

fn merge_group(group: Vec<Poi>) -> Poi {
    let first = &group[0];
    let (lat, lon) = first.position.location_key();
    let merged_types: Vec<String> = group.iter().map(|p| p.primary_type.clone()).collect();
    let primary = if merged_types.iter().all(|t| *t == merged_types[0]) {
        merged_types[0].clone()
    } else {
        MULTIPLE.to_string()
    };
    let mut types = vec![primary.clone()];
    for t in group.iter().flat_map(|p| &p.predefined_types) {
        if !types.contains(t) {
            types.push(t.clone());
        }
    }
    let mut names: Vec<&str> = Vec::new();
    for p in &group {
        if !names.contains(&p.name.as_str()) {
            names.push(&p.name);
        }
    }
    Poi {
        id: format!("merged:{}:{}", fmt_micro(lat), fmt_micro(lon)),
        name: names.join(" / "),
        position: first.position,
        predefined_types: types,
        primary_type: primary,
        group: None,
        source: PoiSource::Merged,
        parent_id: None,
        merged_types,
        place_id: None,
        query_type: None,
        vicinity: group.iter().find_map(|p| p.vicinity.clone()),
    }
}

fn fmt_micro(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
}

pub fn assign_groups(mut pois: Vec<Poi>, taxonomy: &GroupTaxonomy) -> Result<Vec<Poi>, PoiError> {
    for p in &mut pois {
        let g = taxonomy
            .group_of(&p.primary_type)
            .ok_or_else(|| PoiError::UnmappedPrimaryType(p.primary_type.clone()))?;
        p.group = Some(g.to_string());
    }
    Ok(pois)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeOptions {
    pub manual: Vec<ManualPoi>,
    pub buffers: Vec<BufferSpec>,
    pub taxonomy: GroupTaxonomy,
    pub excluded_types: Vec<String>,
    pub merge: MergeOptions,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            manual: vec![],
            buffers: vec![],
            taxonomy: GroupTaxonomy::bundled(),
            excluded_types: vec!["bus_station".to_string()],
            merge: MergeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeReport {
    pub raw: usize,
    pub excluded: usize,
    pub manual: usize,
    pub merge: MergeReport,
    pub buffers: usize,
    pub output: usize,
}

/// Primary types, exclusions, manual POIs, dedupe and merge, buffers, then
/// groups. Buffers come after the merge so ring points never fold into
/// another POI.
pub fn normalize(
    raw: Vec<RawPoi>,
    options: &NormalizeOptions,
) -> Result<(Catalog, NormalizeReport), PoiError> {
    let mut report = NormalizeReport {
        raw: raw.len(),
        ..Default::default()
    };
    let pois = raw
        .into_iter()
        .map(assign_primary)
        .collect::<Result<Vec<_>, _>>()?;
    let (pois, excluded) = exclude_primary_types(pois, &options.excluded_types);
    report.excluded = excluded;
    let pois = add_manual_pois(pois, &options.manual)?;
    report.manual = options.manual.len();
    let (pois, merge) = dedupe_and_merge_with(pois, &options.merge);
    report.merge = merge;
    let (pois, buffers) = generate_buffers(pois, &options.buffers)?;
    report.buffers = buffers;
    let pois = assign_groups(pois, &options.taxonomy)?;
    report.output = pois.len();
    Ok((Catalog::new(pois)?, report))
}
