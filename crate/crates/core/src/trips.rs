//! Trip reconstruction from per-scooter timelines, and cleaning.
//!
//! A scooter seen at `A` in one update and next seen at `B` (any number of
//! updates later, possibly after being absent while ridden) produced a trip
//! `A -> B` that started at the last update showing it at `A` and ended at the
//! first update showing it at `B`. Timelines reset at each local midnight.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, BBox, GeoPoint};
use crate::ingest::{format_ts, SnapshotBatch};

/// Positions closer than this are the same parking spot.
pub const COLOCATION_EPSILON_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TripError {
    #[error("invalid cleaning rules: {0}")]
    InvalidRules(String),
    #[error("trip file: {0}")]
    Csv(#[from] csv::Error),
    #[error("trip file row {row}: {reason}")]
    BadRow { row: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub scooter_id: String,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    pub displacement_m: f64,
}

/// Extracted trips before cleaning have the same shape as cleaned ones.
pub type RawTrip = Trip;

impl Trip {
    pub fn new(
        scooter_id: impl Into<String>,
        origin: GeoPoint,
        destination: GeoPoint,
        start_ts: DateTime<Utc>,
        end_ts: DateTime<Utc>,
    ) -> Self {
        Trip {
            scooter_id: scooter_id.into(),
            origin,
            destination,
            start_ts,
            end_ts,
            displacement_m: haversine_m(origin, destination),
        }
    }

    pub fn duration(&self) -> chrono::Duration {
        self.end_ts - self.start_ts
    }
}

struct LastSeen {
    position: GeoPoint,
    ts: DateTime<Utc>,
    day: NaiveDate,
}

/// Incremental trip extractor. Feed it batches in timestamp order.
pub struct TripExtractor {
    tz: Tz,
    epsilon_m: f64,
    last: HashMap<String, LastSeen>,
}

impl TripExtractor {
    pub fn new(tz: Tz) -> Self {
        TripExtractor {
            tz,
            epsilon_m: COLOCATION_EPSILON_M,
            last: HashMap::new(),
        }
    }

    pub fn with_epsilon(mut self, epsilon_m: f64) -> Self {
        self.epsilon_m = epsilon_m;
        self
    }

    /// Processes one update and appends any trips it completes to `out`.
    pub fn push(&mut self, batch: &SnapshotBatch, out: &mut Vec<Trip>) {
        let day = batch.ts.with_timezone(&self.tz).date_naive();
        for obs in &batch.observations {
            match self.last.get_mut(obs.scooter_id.as_str()) {
                Some(last) => {
                    if last.day == day {
                        let moved = haversine_m(last.position, obs.position);
                        if moved > self.epsilon_m {
                            out.push(Trip {
                                scooter_id: obs.scooter_id.clone(),
                                origin: last.position,
                                destination: obs.position,
                                start_ts: last.ts,
                                end_ts: batch.ts,
                                displacement_m: moved,
                            });
                        }
                    }
                    last.position = obs.position;
                    last.ts = batch.ts;
                    last.day = day;
                }
                None => {
                    self.last.insert(
                        obs.scooter_id.clone(),
                        LastSeen {
                            position: obs.position,
                            ts: batch.ts,
                            day,
                        },
                    );
                }
            }
        }
    }
}

/// Extracts every trip from a timestamp-ordered batch sequence, in the order
/// their end updates appear.
pub fn extract_trips<'a>(
    batches: impl IntoIterator<Item = &'a SnapshotBatch>,
    tz: Tz,
) -> Vec<Trip> {
    let mut extractor = TripExtractor::new(tz);
    let mut out = Vec::new();
    for batch in batches {
        extractor.push(batch, &mut out);
    }
    out
}

/// Filters applied to raw trips: operating hours, then displacement bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningRules {
    pub min_displacement_m: f64,
    pub max_displacement_m: f64,
    #[serde(with = "clock")]
    pub day_start: NaiveTime,
    #[serde(with = "clock")]
    pub day_end: NaiveTime,
    pub timezone: Tz,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            min_displacement_m: 75.0,
            max_displacement_m: 3000.0,
            day_start: NaiveTime::from_hms_opt(7, 0, 0).expect("valid time"),
            day_end: NaiveTime::from_hms_opt(21, 0, 0).expect("valid time"),
            timezone: chrono_tz::America::New_York,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    Hours,
    TooShort,
    TooLong,
}

impl CleaningRules {
    pub fn validate(&self) -> Result<(), TripError> {
        let (min, max) = (self.min_displacement_m, self.max_displacement_m);
        if !(min.is_finite() && max.is_finite() && 0.0 <= min && min < max) {
            return Err(TripError::InvalidRules(format!(
                "displacement bounds must satisfy 0 <= min < max, got [{min}, {max}]"
            )));
        }
        if self.day_start >= self.day_end {
            return Err(TripError::InvalidRules(format!(
                "day_start {} must precede day_end {}",
                self.day_start, self.day_end
            )));
        }
        Ok(())
    }

    pub fn within_hours(&self, ts: DateTime<Utc>) -> bool {
        let t = ts.with_timezone(&self.timezone).time();
        self.day_start <= t && t < self.day_end
    }

    /// First rule the trip breaks, hours before distance.
    pub fn violation(&self, trip: &Trip) -> Option<Violation> {
        if !self.within_hours(trip.start_ts) || !self.within_hours(trip.end_ts) {
            Some(Violation::Hours)
        } else if trip.displacement_m < self.min_displacement_m {
            Some(Violation::TooShort)
        } else if trip.displacement_m > self.max_displacement_m {
            Some(Violation::TooLong)
        } else {
            None
        }
    }
}

/// Per-rule removal counts, plus how many input trips moved less than
/// 5, 10 and 20 meters (cumulative bins).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: u64,
    pub removed_hours: u64,
    pub removed_too_short: u64,
    pub removed_too_long: u64,
    pub kept: u64,
    pub under_5m: u64,
    pub under_10m: u64,
    pub under_20m: u64,
}

impl CleaningReport {
    pub fn removed_distance(&self) -> u64 {
        self.removed_too_short + self.removed_too_long
    }
}

pub fn clean_trips(
    trips: impl IntoIterator<Item = Trip>,
    rules: &CleaningRules,
) -> (Vec<Trip>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut kept = Vec::new();
    for trip in trips {
        report.input += 1;
        let d = trip.displacement_m;
        report.under_5m += u64::from(d < 5.0);
        report.under_10m += u64::from(d < 10.0);
        report.under_20m += u64::from(d < 20.0);
        match rules.violation(&trip) {
            Some(Violation::Hours) => report.removed_hours += 1,
            Some(Violation::TooShort) => report.removed_too_short += 1,
            Some(Violation::TooLong) => report.removed_too_long += 1,
            None => {
                report.kept += 1;
                kept.push(trip);
            }
        }
    }
    (kept, report)
}

/// Keeps trips whose origin and destination both lie inside `bbox`.
pub fn crop_to_region(trips: Vec<Trip>, bbox: &BBox) -> (Vec<Trip>, u64) {
    let before = trips.len();
    let kept: Vec<Trip> = trips
        .into_iter()
        .filter(|t| bbox.contains(t.origin) && bbox.contains(t.destination))
        .collect();
    let removed = (before - kept.len()) as u64;
    (kept, removed)
}

/// Flat CSV row shared by the trip and associated-trip files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TripRow {
    pub scooter_id: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub dest_lat: f64,
    pub dest_lon: f64,
    pub start_ts: String,
    pub end_ts: String,
    pub displacement_m: f64,
}

impl From<&Trip> for TripRow {
    fn from(t: &Trip) -> Self {
        TripRow {
            scooter_id: t.scooter_id.clone(),
            origin_lat: t.origin.lat,
            origin_lon: t.origin.lon,
            dest_lat: t.destination.lat,
            dest_lon: t.destination.lon,
            start_ts: format_ts(t.start_ts),
            end_ts: format_ts(t.end_ts),
            displacement_m: t.displacement_m,
        }
    }
}

impl TripRow {
    pub(crate) fn into_trip(self, row: u64) -> Result<Trip, TripError> {
        let bad = |reason: String| TripError::BadRow { row, reason };
        let ts = |s: &str| {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|e| bad(format!("bad timestamp `{s}`: {e}")))
        };
        let point = |lat, lon| GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()));
        let trip = Trip {
            origin: point(self.origin_lat, self.origin_lon)?,
            destination: point(self.dest_lat, self.dest_lon)?,
            start_ts: ts(&self.start_ts)?,
            end_ts: ts(&self.end_ts)?,
            scooter_id: self.scooter_id,
            displacement_m: self.displacement_m,
        };
        if trip.end_ts <= trip.start_ts {
            return Err(bad("end_ts must follow start_ts".into()));
        }
        Ok(trip)
    }
}

pub fn write_trips_csv<W: Write>(w: W, trips: &[Trip]) -> Result<(), TripError> {
    let mut writer = csv::Writer::from_writer(w);
    if trips.is_empty() {
        writer.write_record([
            "scooter_id",
            "origin_lat",
            "origin_lon",
            "dest_lat",
            "dest_lon",
            "start_ts",
            "end_ts",
            "displacement_m",
        ])?;
    }
    for t in trips {
        writer.serialize(TripRow::from(t))?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trips_csv<R: Read>(r: R) -> Result<Vec<Trip>, TripError> {
    let mut reader = csv::Reader::from_reader(r);
    reader
        .deserialize::<TripRow>()
        .enumerate()
        .map(|(i, row)| row?.into_trip(i as u64 + 2))
        .collect()
}

/// `HH:MM` or `HH:MM:SS` clock times.
pub(crate) mod clock {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveTime::parse_from_str(&s, "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(&s, "%H:%M:%S"))
            .map_err(|_| serde::de::Error::custom(format!("bad clock time `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::offset_azimuthal;
    use crate::ingest::ScooterObservation;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    const NY: Tz = chrono_tz::America::New_York;

    fn local(h: u32, m: u32) -> DateTime<Utc> {
        NY.with_ymd_and_hms(2019, 2, 5, h, m, 0)
            .unwrap()
            .with_timezone(&Utc)
    }

    fn batch(ts: DateTime<Utc>, obs: &[(&str, GeoPoint)]) -> SnapshotBatch {
        SnapshotBatch {
            ts,
            observations: obs
                .iter()
                .map(|(id, p)| ScooterObservation {
                    scooter_id: id.to_string(),
                    position: *p,
                })
                .collect(),
        }
    }

    fn a() -> GeoPoint {
        GeoPoint {
            lat: 33.77,
            lon: -84.39,
        }
    }

    #[test]
    fn gap_then_move_yields_one_trip() {
        let t0 = local(12, 0);
        let b = offset_azimuthal(a(), 90.0, 500.0);
        let feed = vec![
            batch(t0, &[("S", a())]),
            batch(t0 + Duration::seconds(600), &[("S", a())]),
            batch(t0 + Duration::seconds(1200), &[]),
            batch(t0 + Duration::seconds(1800), &[("S", b)]),
        ];
        let trips = extract_trips(&feed, NY);
        assert_eq!(trips.len(), 1);
        let t = &trips[0];
        assert_eq!(t.start_ts, t0 + Duration::seconds(600));
        assert_eq!(t.end_ts, t0 + Duration::seconds(1800));
        assert_eq!((t.origin, t.destination), (a(), b));
        assert!((t.displacement_m - 500.0).abs() < 1e-6);
    }

    #[test]
    fn consecutive_move_without_gap() {
        let t0 = local(12, 0);
        let b = offset_azimuthal(a(), 10.0, 300.0);
        let feed = vec![
            batch(t0, &[("S", a())]),
            batch(t0 + Duration::seconds(600), &[("S", b)]),
        ];
        let trips = extract_trips(&feed, NY);
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].start_ts, t0);
        assert_eq!(trips[0].end_ts, t0 + Duration::seconds(600));
    }

    #[test]
    fn stationary_and_jitter_produce_nothing() {
        let t0 = local(7, 0);
        let feed: Vec<_> = (0..84)
            .map(|i| {
                let p = offset_azimuthal(a(), (i * 37) as f64 % 360.0, 0.4);
                batch(t0 + Duration::seconds(600 * i), &[("S", p)])
            })
            .collect();
        assert!(extract_trips(&feed, NY).is_empty());
    }

    #[test]
    fn timelines_reset_at_local_midnight() {
        let late = NY
            .with_ymd_and_hms(2019, 2, 5, 23, 50, 0)
            .unwrap()
            .with_timezone(&Utc);
        let b = offset_azimuthal(a(), 0.0, 800.0);
        let feed = vec![
            batch(late, &[("S", a())]),
            batch(late + Duration::seconds(1200), &[("S", b)]),
        ];
        assert!(extract_trips(&feed, NY).is_empty());
    }

    fn trip(d: f64, start: DateTime<Utc>, end: DateTime<Utc>) -> Trip {
        // Pin the displacement so boundary cases are not at the mercy of rounding.
        let mut t = Trip::new("S", a(), offset_azimuthal(a(), 45.0, d), start, end);
        t.displacement_m = d;
        t
    }

    #[test]
    fn cleaning_rules_and_bounds() {
        let rules = CleaningRules::default();
        let (kept, report) = clean_trips(
            vec![
                trip(50.0, local(12, 0), local(12, 10)),
                trip(75.0, local(12, 0), local(12, 10)),
                trip(3000.0, local(12, 0), local(12, 10)),
                trip(3001.0, local(12, 0), local(12, 10)),
                trip(500.0, local(6, 50), local(7, 10)),
                trip(500.0, local(20, 50), local(21, 0)),
                trip(500.0, local(7, 0), local(20, 59)),
            ],
            &rules,
        );
        assert_eq!(kept.len(), 3);
        assert_eq!(report.removed_too_short, 1);
        assert_eq!(report.removed_too_long, 1);
        assert_eq!(report.removed_hours, 2);
        assert_eq!(report.kept, 3);
        assert_eq!(report.input, 7);
    }

    #[test]
    fn diagnostic_bins_are_cumulative() {
        let t = |d| trip(d, local(12, 0), local(12, 10));
        let (_, report) = clean_trips(
            vec![t(2.0), t(4.9), t(7.0), t(15.0), t(19.99), t(20.0), t(100.0)],
            &CleaningRules::default(),
        );
        assert_eq!(
            (report.under_5m, report.under_10m, report.under_20m),
            (2, 3, 5)
        );
    }

    #[test]
    fn rules_validation_and_serde() {
        let rules = CleaningRules {
            min_displacement_m: 4000.0,
            ..Default::default()
        };
        assert!(rules.validate().is_err());
        let json = r#"{"min_displacement_m":10,"day_start":"06:30","timezone":"America/Chicago"}"#;
        let parsed: CleaningRules = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.max_displacement_m, 3000.0);
        assert_eq!(parsed.day_start, NaiveTime::from_hms_opt(6, 30, 0).unwrap());
        assert_eq!(parsed.timezone, chrono_tz::America::Chicago);
        let back: CleaningRules =
            serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
        assert_eq!(back, parsed);
    }

    #[test]
    fn csv_round_trip() {
        let trips = vec![trip(120.5, local(9, 0), local(9, 20))];
        let mut buf = Vec::new();
        write_trips_csv(&mut buf, &trips).unwrap();
        let back = read_trips_csv(&buf[..]).unwrap();
        assert_eq!(back, trips);
        let mut empty = Vec::new();
        write_trips_csv(&mut empty, &[]).unwrap();
        assert!(read_trips_csv(&empty[..]).unwrap().is_empty());
    }

    fn timeline() -> impl Strategy<Value = Vec<SnapshotBatch>> {
        // Three scooters hopping among a few spots, sometimes absent.
        prop::collection::vec(prop::collection::vec(0u8..5, 3), 1..60).prop_map(|steps| {
            let t0 = local(7, 0);
            let spots: Vec<GeoPoint> = (0..4)
                .map(|k| offset_azimuthal(a(), 90.0 * k as f64, 150.0 * (k + 1) as f64))
                .collect();
            steps
                .into_iter()
                .enumerate()
                .map(|(i, picks)| SnapshotBatch {
                    ts: t0 + Duration::seconds(600 * i as i64),
                    observations: picks
                        .into_iter()
                        .enumerate()
                        .filter(|(_, p)| *p < 4)
                        .map(|(s, p)| ScooterObservation {
                            scooter_id: format!("s{s}"),
                            position: spots[p as usize],
                        })
                        .collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn trips_match_observations(feed in timeline()) {
            let trips = extract_trips(&feed, NY);
            let seen = |id: &str, ts: DateTime<Utc>| {
                feed.iter()
                    .find(|b| b.ts == ts)
                    .and_then(|b| b.observations.iter().find(|o| o.scooter_id == id))
                    .map(|o| o.position)
            };
            let mut last_end: HashMap<&str, DateTime<Utc>> = HashMap::new();
            for t in &trips {
                prop_assert!(t.end_ts > t.start_ts);
                prop_assert_eq!(seen(&t.scooter_id, t.start_ts), Some(t.origin));
                prop_assert_eq!(seen(&t.scooter_id, t.end_ts), Some(t.destination));
                prop_assert!((t.displacement_m - haversine_m(t.origin, t.destination)).abs()
                    <= 1e-6 * t.displacement_m);
                if let Some(prev) = last_end.insert(&t.scooter_id, t.end_ts) {
                    prop_assert!(prev <= t.start_ts);
                }
            }
        }

        #[test]
        fn cleaning_idempotent_and_balanced(
            specs in prop::collection::vec((0.0f64..4000.0, 5u32..22, 0u32..60, 1i64..40), 0..50)
        ) {
            let trips: Vec<Trip> = specs
                .iter()
                .map(|(d, h, m, dur)| {
                    let start = local(*h, *m);
                    trip(d.max(0.01), start, start + Duration::minutes(*dur))
                })
                .collect();
            let rules = CleaningRules::default();
            let (kept, report) = clean_trips(trips.clone(), &rules);
            prop_assert_eq!(
                report.kept + report.removed_hours + report.removed_distance(),
                trips.len() as u64
            );
            let (again, _) = clean_trips(kept.clone(), &rules);
            prop_assert_eq!(again, kept);
        }
    }
}
