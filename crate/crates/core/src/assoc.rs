//! Trip endpoint to POI association and distance-threshold sensitivity.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, SpatialIndex};
use crate::poi::Catalog;
use crate::trips::{Trip, TripError, TripRow};

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("cannot associate trips with an empty POI catalog")]
    EmptyCatalog,
    #[error("POI `{0}` is not in the catalog")]
    DanglingPoiReference(String),
    #[error("POI `{0}` has no group")]
    UngroupedPoi(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("unknown endpoint `{0}` (expected origin or destination)")]
    UnknownEndpoint(String),
    #[error("association file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Trip(#[from] TripError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociatedTrip {
    pub trip: Trip,
    pub origin_poi: String,
    pub origin_dist_m: f64,
    pub dest_poi: String,
    pub dest_dist_m: f64,
    pub origin_reassigned: bool,
}

impl AssociatedTrip {
    pub fn distance(&self, endpoint: Endpoint) -> f64 {
        match endpoint {
            Endpoint::Origin => self.origin_dist_m,
            Endpoint::Destination => self.dest_dist_m,
        }
    }

    pub fn poi(&self, endpoint: Endpoint) -> &str {
        match endpoint {
            Endpoint::Origin => &self.origin_poi,
            Endpoint::Destination => &self.dest_poi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Origin,
    Destination,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endpoint::Origin => "origin",
            Endpoint::Destination => "destination",
        })
    }
}

impl FromStr for Endpoint {
    type Err = AssocError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "origin" => Ok(Endpoint::Origin),
            "destination" | "dest" => Ok(Endpoint::Destination),
            _ => Err(AssocError::UnknownEndpoint(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub trips: u64,
    pub reassigned: u64,
    /// Both endpoints on the same POI with no other POI to move the origin to.
    pub unresolved_same_poi: u64,
}

/// Nearest POI for each endpoint. When both land on the same POI the origin
/// moves to its second-nearest one, since riders choose where they stop more
/// deliberately than where they find a scooter.
pub fn associate(
    trips: &[Trip],
    index: &SpatialIndex<String>,
) -> Result<(Vec<AssociatedTrip>, AssociationReport), AssocError> {
    if index.is_empty() {
        return Err(AssocError::EmptyCatalog);
    }
    let out = trips
        .par_iter()
        .map(|t| associate_one(t, index))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = AssociationReport {
        trips: out.len() as u64,
        ..Default::default()
    };
    for a in &out {
        if a.origin_reassigned {
            report.reassigned += 1;
        } else if a.origin_poi == a.dest_poi {
            report.unresolved_same_poi += 1;
        }
    }
    if report.unresolved_same_poi > 0 {
        log::warn!(
            "{} trips start and end at the only POI in the catalog",
            report.unresolved_same_poi
        );
    }
    Ok((out, report))
}

fn associate_one(trip: &Trip, index: &SpatialIndex<String>) -> Result<AssociatedTrip, AssocError> {
    let dest = index.nearest(trip.destination)?;
    let origins = index.nearest_k(trip.origin, 2)?;
    let (origin, reassigned) = match origins.as_slice() {
        [first, second, ..] if first.id == dest.id => (second, true),
        [first, ..] => (first, false),
        [] => unreachable!("nearest_k on a non-empty index returns hits"),
    };
    Ok(AssociatedTrip {
        trip: trip.clone(),
        origin_poi: origin.id.clone(),
        origin_dist_m: origin.distance_m,
        dest_poi: dest.id,
        dest_dist_m: dest.distance_m,
        origin_reassigned: reassigned,
    })
}

/// Trips with both endpoints within `cutoff_m` (inclusive).
pub fn apply_threshold(assoc: &[AssociatedTrip], cutoff_m: f64) -> Vec<AssociatedTrip> {
    assoc
        .iter()
        .filter(|a| a.origin_dist_m <= cutoff_m && a.dest_dist_m <= cutoff_m)
        .cloned()
        .collect()
}

/// Trips whose `endpoint` lies within `cutoff_m` (inclusive).
pub fn apply_threshold_single(
    assoc: &[AssociatedTrip],
    cutoff_m: f64,
    endpoint: Endpoint,
) -> Vec<AssociatedTrip> {
    assoc
        .iter()
        .filter(|a| a.distance(endpoint) <= cutoff_m)
        .cloned()
        .collect()
}

/// Whether a trip counts at a threshold by its charted endpoint alone, or
/// only when both endpoints are within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Single,
    Both,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Single => "single",
            ThresholdMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub endpoint: Endpoint,
    pub mode: ThresholdMode,
    pub thresholds: Vec<f64>,
    pub groups: Vec<String>,
    /// `counts[g][i]`: trips in group `g` within `thresholds[i]`.
    pub counts: Vec<Vec<u64>>,
}

impl SensitivityTable {
    pub fn total_at(&self, i: usize) -> u64 {
        self.counts.iter().map(|row| row[i]).sum()
    }

    /// Share of group `g` among all trips counted at threshold `i`; zero
    /// when nothing is counted.
    pub fn percent(&self, g: usize, i: usize) -> f64 {
        let total = self.total_at(i);
        if total == 0 {
            0.0
        } else {
            self.counts[g][i] as f64 * 100.0 / total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AssocError> {
        write_sensitivity_csv(w, std::slice::from_ref(self))
    }
}

pub fn write_sensitivity_csv<W: Write>(
    w: W,
    tables: &[SensitivityTable],
) -> Result<(), AssocError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["endpoint", "group", "threshold_m", "count", "percent"])?;
    for t in tables {
        for (g, name) in t.groups.iter().enumerate() {
            for (i, th) in t.thresholds.iter().enumerate() {
                out.write_record([
                    t.endpoint.to_string(),
                    name.clone(),
                    th.to_string(),
                    t.counts[g][i].to_string(),
                    format!("{:.4}", t.percent(g, i)),
                ])?;
            }
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Per-group trip counts at each threshold, grouped by the group of the
/// chosen endpoint's POI.
pub fn sensitivity(
    assoc: &[AssociatedTrip],
    catalog: &Catalog,
    groups: &[String],
    thresholds: &[f64],
    endpoint: Endpoint,
    mode: ThresholdMode,
) -> Result<SensitivityTable, AssocError> {
    check_thresholds(thresholds)?;
    let slot: HashMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    // first_bucket[g][i]: trips whose first qualifying threshold is i.
    let mut first_bucket = vec![vec![0u64; thresholds.len()]; groups.len()];
    for a in assoc {
        let id = a.poi(endpoint);
        let poi = catalog
            .get(id)
            .ok_or_else(|| AssocError::DanglingPoiReference(id.to_string()))?;
        let group = poi
            .group
            .as_deref()
            .ok_or_else(|| AssocError::UngroupedPoi(id.to_string()))?;
        let g = *slot
            .get(group)
            .ok_or_else(|| AssocError::UngroupedPoi(id.to_string()))?;
        let d = match mode {
            ThresholdMode::Single => a.distance(endpoint),
            ThresholdMode::Both => a.origin_dist_m.max(a.dest_dist_m),
        };
        let i = thresholds.partition_point(|&t| t < d);
        if i < thresholds.len() {
            first_bucket[g][i] += 1;
        }
    }
    let counts = first_bucket
        .into_iter()
        .map(|row| {
            row.into_iter()
                .scan(0u64, |acc, c| {
                    *acc += c;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    Ok(SensitivityTable {
        endpoint,
        mode,
        thresholds: thresholds.to_vec(),
        groups: groups.to_vec(),
        counts,
    })
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), AssocError> {
    if thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(AssocError::InvalidThresholds(
            "thresholds must be non-negative".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AssocError::InvalidThresholds(
            "thresholds must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Parses `start:end:step` (inclusive range) or a comma-separated list.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>, AssocError> {
    let bad = |why: &str| AssocError::InvalidThresholds(format!("`{spec}`: {why}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let out = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, end, step] = parts.as_slice() else {
            return Err(bad("expected start:end:step"));
        };
        let (start, end, step) = (num(start)?, num(end)?, num(step)?);
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(bad("need step > 0 and end >= start"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + step * i as f64).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    check_thresholds(&out)?;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct AssocRow {
    scooter_id: String,
    origin_lat: f64,
    origin_lon: f64,
    dest_lat: f64,
    dest_lon: f64,
    start_ts: String,
    end_ts: String,
    displacement_m: f64,
    origin_poi: String,
    origin_dist_m: f64,
    dest_poi: String,
    dest_dist_m: f64,
    origin_reassigned: bool,
}

pub fn write_associated_csv<W: Write>(w: W, assoc: &[AssociatedTrip]) -> Result<(), AssocError> {
    let mut out = csv::Writer::from_writer(w);
    if assoc.is_empty() {
        out.write_record([
            "scooter_id",
            "origin_lat",
            "origin_lon",
            "dest_lat",
            "dest_lon",
            "start_ts",
            "end_ts",
            "displacement_m",
            "origin_poi",
            "origin_dist_m",
            "dest_poi",
            "dest_dist_m",
            "origin_reassigned",
        ])?;
    }
    for a in assoc {
        let t = TripRow::from(&a.trip);
        out.serialize(AssocRow {
            scooter_id: t.scooter_id,
            origin_lat: t.origin_lat,
            origin_lon: t.origin_lon,
            dest_lat: t.dest_lat,
            dest_lon: t.dest_lon,
            start_ts: t.start_ts,
            end_ts: t.end_ts,
            displacement_m: t.displacement_m,
            origin_poi: a.origin_poi.clone(),
            origin_dist_m: a.origin_dist_m,
            dest_poi: a.dest_poi.clone(),
            dest_dist_m: a.dest_dist_m,
            origin_reassigned: a.origin_reassigned,
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_associated_csv<R: Read>(r: R) -> Result<Vec<AssociatedTrip>, AssocError> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<AssocRow>().enumerate() {
        let row = row?;
        let trip = TripRow {
            scooter_id: row.scooter_id,
            origin_lat: row.origin_lat,
            origin_lon: row.origin_lon,
            dest_lat: row.dest_lat,
            dest_lon: row.dest_lon,
            start_ts: row.start_ts,
            end_ts: row.end_ts,
            displacement_m: row.displacement_m,
        }
        .into_trip(i as u64 + 2)?;
        out.push(AssociatedTrip {
            trip,
            origin_poi: row.origin_poi,
            origin_dist_m: row.origin_dist_m,
            dest_poi: row.dest_poi,
            dest_dist_m: row.dest_dist_m,
            origin_reassigned: row.origin_reassigned,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{haversine_m, offset_azimuthal, GeoPoint};
    use crate::poi::test_support::poi;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn base() -> GeoPoint {
        GeoPoint {
            lat: 33.77,
            lon: -84.39,
        }
    }

    fn trip(origin: GeoPoint, dest: GeoPoint) -> Trip {
        let t0 = Utc.with_ymd_and_hms(2019, 2, 4, 15, 0, 0).unwrap();
        Trip::new("S", origin, dest, t0, t0 + chrono::Duration::minutes(10))
    }

    fn index(points: &[(&str, GeoPoint)]) -> SpatialIndex<String> {
        SpatialIndex::build(points.iter().map(|(id, p)| (id.to_string(), *p)).collect())
    }

    /// Double-loop oracle: sort every POI by (distance, id).
    fn brute(trip: &Trip, pois: &[(String, GeoPoint)]) -> (String, f64, String, f64, bool) {
        let ranked = |q: GeoPoint| {
            let mut v: Vec<(f64, &String)> = pois
                .iter()
                .map(|(id, p)| (haversine_m(q, *p), id))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            v
        };
        let d = ranked(trip.destination);
        let o = ranked(trip.origin);
        if o[0].1 == d[0].1 && o.len() > 1 {
            (o[1].1.clone(), o[1].0, d[0].1.clone(), d[0].0, true)
        } else {
            (o[0].1.clone(), o[0].0, d[0].1.clone(), d[0].0, false)
        }
    }

    #[test]
    fn distinct_nearest_pois() {
        let a = offset_azimuthal(base(), 0.0, 10.0);
        let b = offset_azimuthal(base(), 90.0, 1000.0);
        let idx = index(&[("A", base()), ("B", b)]);
        let (out, report) = associate(&[trip(a, offset_azimuthal(b, 180.0, 5.0))], &idx).unwrap();
        let r = &out[0];
        assert_eq!((r.origin_poi.as_str(), r.dest_poi.as_str()), ("A", "B"));
        assert!((r.origin_dist_m - 10.0).abs() < 1e-6);
        assert!((r.dest_dist_m - 5.0).abs() < 1e-6);
        assert!(!r.origin_reassigned);
        assert_eq!(report.reassigned, 0);
    }

    #[test]
    fn shared_poi_moves_origin_to_second_nearest() {
        let a = base();
        let c = offset_azimuthal(a, 270.0, 40.0);
        let far = offset_azimuthal(a, 90.0, 500.0);
        let idx = index(&[("A", a), ("C", c), ("F", far)]);
        let origin = offset_azimuthal(a, 270.0, 10.0);
        let dest = offset_azimuthal(a, 0.0, 20.0);
        let t = trip(origin, dest);
        let (out, report) = associate(std::slice::from_ref(&t), &idx).unwrap();
        let r = &out[0];
        assert_eq!((r.origin_poi.as_str(), r.dest_poi.as_str()), ("C", "A"));
        assert!((r.origin_dist_m - 30.0).abs() < 1e-3);
        assert!(r.origin_reassigned);
        assert_eq!(report.reassigned, 1);
    }

    #[test]
    fn single_poi_catalog_is_flagged() {
        let idx = index(&[("A", base())]);
        let t = trip(
            offset_azimuthal(base(), 0.0, 5.0),
            offset_azimuthal(base(), 90.0, 5.0),
        );
        let (out, report) = associate(&[t], &idx).unwrap();
        assert_eq!(out[0].origin_poi, out[0].dest_poi);
        assert!(!out[0].origin_reassigned);
        assert_eq!(report.unresolved_same_poi, 1);
        let empty: SpatialIndex<String> = SpatialIndex::build(vec![]);
        assert!(matches!(
            associate(&[], &empty),
            Err(AssocError::EmptyCatalog)
        ));
    }

    fn assoc_with(
        origin_dist_m: f64,
        dest_dist_m: f64,
        origin_poi: &str,
        dest_poi: &str,
    ) -> AssociatedTrip {
        AssociatedTrip {
            trip: trip(base(), offset_azimuthal(base(), 0.0, 500.0)),
            origin_poi: origin_poi.into(),
            origin_dist_m,
            dest_poi: dest_poi.into(),
            dest_dist_m,
            origin_reassigned: false,
        }
    }

    #[test]
    fn both_endpoint_cutoff() {
        let v = vec![
            assoc_with(49.0, 51.0, "a", "b"),
            assoc_with(50.0, 50.0, "a", "b"),
        ];
        let kept = apply_threshold(&v, 50.0);
        assert_eq!(kept, vec![v[1].clone()]);
        assert_eq!(apply_threshold(&v, f64::INFINITY), v);
        assert_eq!(apply_threshold_single(&v, 50.0, Endpoint::Origin).len(), 2);
    }

    fn grouped_catalog() -> (Catalog, Vec<String>) {
        let mut a = poi("a", 33.77, -84.39, "bar");
        a.group = Some("Recreation".into());
        let mut b = poi("b", 33.78, -84.39, "cafe");
        b.group = Some("Food".into());
        (
            Catalog::new(vec![a, b]).unwrap(),
            vec!["Recreation".into(), "Food".into()],
        )
    }

    #[test]
    fn sensitivity_counts_and_percentages() {
        let (cat, groups) = grouped_catalog();
        let v: Vec<_> = [10.0, 40.0, 60.0]
            .iter()
            .map(|d| assoc_with(0.0, *d, "b", "a"))
            .collect();
        let t = sensitivity(
            &v,
            &cat,
            &groups,
            &[25.0, 50.0, 75.0],
            Endpoint::Destination,
            ThresholdMode::Single,
        )
        .unwrap();
        assert_eq!(t.counts[0], vec![1, 2, 3]);
        assert_eq!(t.counts[1], vec![0, 0, 0]);
        assert_eq!(t.percent(0, 2), 100.0);

        let empty = sensitivity(
            &[],
            &cat,
            &groups,
            &[25.0, 50.0],
            Endpoint::Origin,
            ThresholdMode::Single,
        )
        .unwrap();
        assert!(empty.counts.iter().flatten().all(|c| *c == 0));

        let even = vec![
            assoc_with(0.0, 10.0, "a", "a"),
            assoc_with(0.0, 10.0, "a", "b"),
        ];
        let t = sensitivity(
            &even,
            &cat,
            &groups,
            &[5.0, 20.0],
            Endpoint::Destination,
            ThresholdMode::Single,
        )
        .unwrap();
        assert_eq!((t.percent(0, 1), t.percent(1, 1)), (50.0, 50.0));

        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("endpoint,group,threshold_m,count,percent\n"));
        assert!(text.contains("destination,Food,20,1,50.0000"));

        assert!(matches!(
            sensitivity(
                &[assoc_with(0.0, 0.0, "zz", "a")],
                &cat,
                &groups,
                &[5.0],
                Endpoint::Origin,
                ThresholdMode::Single
            ),
            Err(AssocError::DanglingPoiReference(_))
        ));
    }

    #[test]
    fn threshold_specs() {
        let t = parse_thresholds("0:100:5").unwrap();
        assert_eq!(t.len(), 21);
        assert_eq!(t[20], 100.0);
        assert_eq!(
            parse_thresholds("25,50,75").unwrap(),
            vec![25.0, 50.0, 75.0]
        );
        assert!(parse_thresholds("10:0:5").is_err());
        assert!(parse_thresholds("50,25").is_err());
        assert!(parse_thresholds("-5").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let v = vec![assoc_with(
            12.5,
            3.25,
            "nearby:bar:x",
            "merged:33.770000:-84.390000",
        )];
        let mut buf = Vec::new();
        write_associated_csv(&mut buf, &v).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header
            .lines()
            .next()
            .unwrap()
            .ends_with("origin_poi,origin_dist_m,dest_poi,dest_dist_m,origin_reassigned"));
        assert_eq!(read_associated_csv(&buf[..]).unwrap(), v);
        let mut empty = Vec::new();
        write_associated_csv(&mut empty, &[]).unwrap();
        assert!(read_associated_csv(&empty[..]).unwrap().is_empty());
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (33.74f64..33.79, -84.41f64..-84.36).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_brute_force(
            pois in prop::collection::vec(arb_point(), 1..200),
            ends in prop::collection::vec((arb_point(), arb_point()), 1..60),
        ) {
            let named: Vec<(String, GeoPoint)> = pois.iter().enumerate().map(|(i, p)| (format!("p{i:03}"), *p)).collect();
            let idx = SpatialIndex::build(named.clone());
            let trips: Vec<Trip> = ends.iter().map(|(o, d)| trip(*o, *d)).collect();
            let (out, _) = associate(&trips, &idx).unwrap();
            for (a, t) in out.iter().zip(&trips) {
                let (op, od, dp, dd, re) = brute(t, &named);
                prop_assert_eq!(&a.origin_poi, &op);
                prop_assert_eq!(&a.dest_poi, &dp);
                prop_assert!((a.origin_dist_m - od).abs() < 1e-6 && (a.dest_dist_m - dd).abs() < 1e-6);
                prop_assert_eq!(a.origin_reassigned, re);
                if named.len() >= 2 {
                    prop_assert_ne!(&a.origin_poi, &a.dest_poi);
                }
            }
        }

        #[test]
        fn nested_cutoffs_compose(
            dists in prop::collection::vec((0f64..120.0, 0f64..120.0), 0..50),
            c1 in 0f64..120.0,
            c2 in 0f64..120.0,
        ) {
            let v: Vec<_> = dists.iter().map(|(o, d)| assoc_with(*o, *d, "a", "b")).collect();
            let once = apply_threshold(&v, c1);
            prop_assert_eq!(apply_threshold(&once, c1), once.clone());
            prop_assert_eq!(apply_threshold(&apply_threshold(&v, c2), c1), apply_threshold(&v, c1.min(c2)));
        }

        #[test]
        fn sensitivity_is_monotone(
            rows in prop::collection::vec((0f64..120.0, 0f64..120.0, any::<bool>()), 0..80),
            both in any::<bool>(),
        ) {
            let (cat, groups) = grouped_catalog();
            let v: Vec<_> = rows.iter().map(|(o, d, g)| assoc_with(*o, *d, "a", if *g { "a" } else { "b" })).collect();
            let thresholds = parse_thresholds("0:100:5").unwrap();
            let mode = if both { ThresholdMode::Both } else { ThresholdMode::Single };
            let t = sensitivity(&v, &cat, &groups, &thresholds, Endpoint::Destination, mode).unwrap();
            for row in &t.counts {
                prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
            }
            for (i, th) in thresholds.iter().enumerate() {
                let expected = match mode {
                    ThresholdMode::Single => apply_threshold_single(&v, *th, Endpoint::Destination).len(),
                    ThresholdMode::Both => apply_threshold(&v, *th).len(),
                };
                prop_assert_eq!(t.total_at(i), expected as u64);
                if expected > 0 {
                    let sum: f64 = (0..groups.len()).map(|g| t.percent(g, i)).sum();
                    prop_assert!((sum - 100.0).abs() <= 0.1);
                }
            }
        }
    }
}
