//! Purpose matrices: origin group by destination group trip counts, sliced by
//! time of day and day type, plus type-level drill-downs and fare estimates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use chrono::{DateTime, Datelike, NaiveTime, Timelike, Utc, Weekday};
use chrono_tz::Tz;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::AssociatedTrip;
use crate::poi::Catalog;
use crate::trips::Trip;

#[derive(Debug, Error)]
pub enum PurposeError {
    #[error("{0} is outside operating hours (07:00 to 21:00)")]
    OutOfOperatingHours(NaiveTime),
    #[error("POI `{0}` is not in the catalog")]
    DanglingPoiReference(String),
    #[error("POI `{poi}` has group `{group}`, which is not one of the matrix groups")]
    UnknownGroup { poi: String, group: String },
    #[error("POI `{0}` has no group")]
    UngroupedPoi(String),
    #[error("bad group pair `{0}` (expected Origin:Destination)")]
    BadGroupPair(String),
    #[error("matrix output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSlot {
    Morning,
    Lunch,
    Afternoon,
    Evening,
    Night,
}

impl TimeSlot {
    pub const ALL: [TimeSlot; 5] = [
        TimeSlot::Morning,
        TimeSlot::Lunch,
        TimeSlot::Afternoon,
        TimeSlot::Evening,
        TimeSlot::Night,
    ];

    /// Start hour (inclusive) and end hour (exclusive).
    pub fn hours(self) -> (u32, u32) {
        match self {
            TimeSlot::Morning => (7, 11),
            TimeSlot::Lunch => (11, 14),
            TimeSlot::Afternoon => (14, 17),
            TimeSlot::Evening => (17, 19),
            TimeSlot::Night => (19, 21),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeSlot::Morning => "morning",
            TimeSlot::Lunch => "lunch",
            TimeSlot::Afternoon => "afternoon",
            TimeSlot::Evening => "evening",
            TimeSlot::Night => "night",
        }
    }
}

impl fmt::Display for TimeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn classify_slot(local: NaiveTime) -> Result<TimeSlot, PurposeError> {
    let h = local.hour();
    TimeSlot::ALL
        .into_iter()
        .find(|s| {
            let (start, end) = s.hours();
            (start..end).contains(&h)
        })
        .ok_or(PurposeError::OutOfOperatingHours(local))
}

pub fn slot_of(ts: DateTime<Utc>, tz: Tz) -> Result<TimeSlot, PurposeError> {
    classify_slot(ts.with_timezone(&tz).time())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayClass {
    Weekday,
    Weekend,
}

impl DayClass {
    /// Monday to Friday by local date.
    pub fn of(ts: DateTime<Utc>, tz: Tz) -> Self {
        match ts.with_timezone(&tz).weekday() {
            Weekday::Sat | Weekday::Sun => DayClass::Weekend,
            _ => DayClass::Weekday,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DayClass::Weekday => "weekday",
            DayClass::Weekend => "weekend",
        }
    }
}

/// Which trips a matrix counts, keyed on the trip's local start time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Overall,
    Slot(TimeSlot),
    Day(DayClass),
}

impl Slice {
    pub fn name(self) -> &'static str {
        match self {
            Slice::Overall => "overall",
            Slice::Slot(s) => s.name(),
            Slice::Day(d) => d.name(),
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Square count matrix, rows are origin groups and columns destination groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeMatrix {
    pub slice: Slice,
    pub groups: Vec<String>,
    counts: Vec<u64>,
}

impl PurposeMatrix {
    pub fn zeros(groups: &[String], slice: Slice) -> Self {
        PurposeMatrix {
            slice,
            groups: groups.to_vec(),
            counts: vec![0; groups.len() * groups.len()],
        }
    }

    pub fn get(&self, origin: usize, dest: usize) -> u64 {
        self.counts[origin * self.groups.len() + dest]
    }

    pub fn cell(&self, origin: &str, dest: &str) -> Option<u64> {
        let o = self.groups.iter().position(|g| g == origin)?;
        let d = self.groups.iter().position(|g| g == dest)?;
        Some(self.get(o, d))
    }

    fn bump(&mut self, origin: usize, dest: usize) {
        self.counts[origin * self.groups.len() + dest] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts
            .chunks(self.groups.len().max(1))
            .map(|r| r.iter().sum())
            .collect()
    }

    /// Cell-wise sum. Panics if the group lists differ.
    pub fn add(&mut self, other: &PurposeMatrix) {
        assert_eq!(self.groups, other.groups, "matrices over different groups");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> PurposeMatrix {
        let n = self.groups.len();
        let mut t = PurposeMatrix::zeros(&self.groups, self.slice);
        for o in 0..n {
            for d in 0..n {
                t.counts[d * n + o] = self.get(o, d);
            }
        }
        t
    }

    /// Header row of destination groups; first column is the origin group.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PurposeError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["origin\\destination".to_string()];
        header.extend(self.groups.iter().cloned());
        out.write_record(&header)?;
        for (o, name) in self.groups.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.groups.len()).map(|d| self.get(o, d).to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Long format for charting: one row per slice and non-empty cell.
pub fn write_long_csv<W: Write>(w: W, matrices: &[&PurposeMatrix]) -> Result<(), PurposeError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["slice", "origin_group", "dest_group", "count"])?;
    for m in matrices {
        for (o, og) in m.groups.iter().enumerate() {
            for (d, dg) in m.groups.iter().enumerate() {
                let c = m.get(o, d);
                if c > 0 {
                    out.write_record([m.slice.name(), og, dg, &c.to_string()])?;
                }
            }
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// The overall matrix and every slice of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixSet {
    pub overall: PurposeMatrix,
    pub slots: [PurposeMatrix; 5],
    pub weekday: PurposeMatrix,
    pub weekend: PurposeMatrix,
}

impl MatrixSet {
    fn zeros(groups: &[String]) -> Self {
        MatrixSet {
            overall: PurposeMatrix::zeros(groups, Slice::Overall),
            slots: TimeSlot::ALL.map(|s| PurposeMatrix::zeros(groups, Slice::Slot(s))),
            weekday: PurposeMatrix::zeros(groups, Slice::Day(DayClass::Weekday)),
            weekend: PurposeMatrix::zeros(groups, Slice::Day(DayClass::Weekend)),
        }
    }

    fn merge(mut self, other: MatrixSet) -> Self {
        self.overall.add(&other.overall);
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add(b);
        }
        self.weekday.add(&other.weekday);
        self.weekend.add(&other.weekend);
        self
    }

    pub fn all(&self) -> Vec<&PurposeMatrix> {
        let mut v = vec![&self.overall];
        v.extend(self.slots.iter());
        v.push(&self.weekday);
        v.push(&self.weekend);
        v
    }
}

/// A trip reduced to what the matrices need.
struct Keyed {
    origin: usize,
    dest: usize,
    slot: TimeSlot,
    day: DayClass,
}

struct GroupLookup<'a> {
    catalog: &'a Catalog,
    slot: HashMap<&'a str, usize>,
}

impl<'a> GroupLookup<'a> {
    fn new(catalog: &'a Catalog, groups: &'a [String]) -> Self {
        GroupLookup {
            catalog,
            slot: groups
                .iter()
                .enumerate()
                .map(|(i, g)| (g.as_str(), i))
                .collect(),
        }
    }

    fn group(&self, id: &str) -> Result<usize, PurposeError> {
        let poi = self
            .catalog
            .get(id)
            .ok_or_else(|| PurposeError::DanglingPoiReference(id.to_string()))?;
        let g = poi
            .group
            .as_deref()
            .ok_or_else(|| PurposeError::UngroupedPoi(id.to_string()))?;
        self.slot
            .get(g)
            .copied()
            .ok_or_else(|| PurposeError::UnknownGroup {
                poi: id.to_string(),
                group: g.to_string(),
            })
    }

    fn key(&self, a: &AssociatedTrip, tz: Tz) -> Result<Keyed, PurposeError> {
        Ok(Keyed {
            origin: self.group(&a.origin_poi)?,
            dest: self.group(&a.dest_poi)?,
            slot: slot_of(a.trip.start_ts, tz)?,
            day: DayClass::of(a.trip.start_ts, tz),
        })
    }
}

fn in_slice(k: &Keyed, slice: Slice) -> bool {
    match slice {
        Slice::Overall => true,
        Slice::Slot(s) => k.slot == s,
        Slice::Day(d) => k.day == d,
    }
}

pub fn build_matrix(
    trips: &[AssociatedTrip],
    catalog: &Catalog,
    groups: &[String],
    tz: Tz,
    slice: Slice,
) -> Result<PurposeMatrix, PurposeError> {
    let lookup = GroupLookup::new(catalog, groups);
    let mut m = PurposeMatrix::zeros(groups, slice);
    for a in trips {
        let k = lookup.key(a, tz)?;
        if in_slice(&k, slice) {
            m.bump(k.origin, k.dest);
        }
    }
    Ok(m)
}

/// Every matrix in one parallel pass over trip chunks.
pub fn build_all(
    trips: &[AssociatedTrip],
    catalog: &Catalog,
    groups: &[String],
    tz: Tz,
) -> Result<MatrixSet, PurposeError> {
    let lookup = GroupLookup::new(catalog, groups);
    trips
        .par_chunks(4096)
        .map(|chunk| {
            let mut set = MatrixSet::zeros(groups);
            for a in chunk {
                let k = lookup.key(a, tz)?;
                set.overall.bump(k.origin, k.dest);
                let s = TimeSlot::ALL.iter().position(|s| *s == k.slot).unwrap();
                set.slots[s].bump(k.origin, k.dest);
                match k.day {
                    DayClass::Weekday => set.weekday.bump(k.origin, k.dest),
                    DayClass::Weekend => set.weekend.bump(k.origin, k.dest),
                }
            }
            Ok(set)
        })
        .try_reduce(|| MatrixSet::zeros(groups), |a, b| Ok(a.merge(b)))
}

/// Primary-type pairs behind one matrix cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrillDown {
    pub origin_group: String,
    pub dest_group: String,
    pub counts: BTreeMap<(String, String), u64>,
}

impl DrillDown {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PurposeError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["origin_type", "dest_type", "count"])?;
        for ((o, d), c) in &self.counts {
            out.write_record([o, d, &c.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Parses `Origin:Destination`.
pub fn parse_group_pair(s: &str) -> Result<(String, String), PurposeError> {
    match s.split_once(':') {
        Some((o, d)) if !o.is_empty() && !d.is_empty() => Ok((o.to_string(), d.to_string())),
        _ => Err(PurposeError::BadGroupPair(s.to_string())),
    }
}

pub fn drill_down(
    trips: &[AssociatedTrip],
    catalog: &Catalog,
    origin_group: &str,
    dest_group: &str,
) -> Result<DrillDown, PurposeError> {
    let mut dd = DrillDown {
        origin_group: origin_group.to_string(),
        dest_group: dest_group.to_string(),
        counts: BTreeMap::new(),
    };
    let get = |id: &str| {
        catalog
            .get(id)
            .ok_or_else(|| PurposeError::DanglingPoiReference(id.to_string()))
    };
    for a in trips {
        let (o, d) = (get(&a.origin_poi)?, get(&a.dest_poi)?);
        if o.group.as_deref() == Some(origin_group) && d.group.as_deref() == Some(dest_group) {
            *dd.counts
                .entry((o.primary_type.clone(), d.primary_type.clone()))
                .or_default() += 1;
        }
    }
    Ok(dd)
}

/// A fare in whole cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fare {
    pub cents: u64,
}

impl fmt::Display for Fare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:02}", self.cents / 100, self.cents % 100)
    }
}

pub const UNLOCK_FEE_CENTS: u64 = 100;
pub const PER_MINUTE_CENTS: u64 = 29;

/// Unlock fee plus a per-minute rate on every started minute.
pub fn fare_for(duration: chrono::Duration) -> Fare {
    let secs = duration.num_seconds().max(0) as u64;
    let minutes = secs.div_ceil(60);
    Fare {
        cents: UNLOCK_FEE_CENTS + PER_MINUTE_CENTS * minutes,
    }
}

pub fn estimate_cost(trip: &Trip) -> Fare {
    fare_for(trip.duration())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::poi::test_support::poi;
    use chrono::{Duration, TimeZone};
    use chrono_tz::America::New_York;
    use proptest::prelude::*;

    fn t(h: u32, m: u32) -> NaiveTime {
        NaiveTime::from_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn slot_boundaries() {
        assert_eq!(classify_slot(t(7, 0)).unwrap(), TimeSlot::Morning);
        assert_eq!(classify_slot(t(10, 59)).unwrap(), TimeSlot::Morning);
        assert_eq!(classify_slot(t(11, 0)).unwrap(), TimeSlot::Lunch);
        assert_eq!(classify_slot(t(13, 59)).unwrap(), TimeSlot::Lunch);
        assert_eq!(classify_slot(t(14, 0)).unwrap(), TimeSlot::Afternoon);
        assert_eq!(classify_slot(t(17, 0)).unwrap(), TimeSlot::Evening);
        assert_eq!(classify_slot(t(19, 0)).unwrap(), TimeSlot::Night);
        assert_eq!(classify_slot(t(20, 59)).unwrap(), TimeSlot::Night);
        assert!(matches!(
            classify_slot(t(21, 0)),
            Err(PurposeError::OutOfOperatingHours(_))
        ));
        assert!(classify_slot(t(6, 59)).is_err());
    }

    #[test]
    fn slots_partition_operating_minutes() {
        for minute in 0..24 * 60 {
            let time = t(minute / 60, minute % 60);
            let hits = TimeSlot::ALL
                .iter()
                .filter(|s| {
                    let (a, b) = s.hours();
                    time >= t(a, 0) && time < t(b, 0)
                })
                .count();
            let operating = (7 * 60..21 * 60).contains(&minute);
            assert_eq!(hits, operating as usize);
            assert_eq!(classify_slot(time).is_ok(), operating);
        }
    }

    #[test]
    fn fares() {
        assert_eq!(fare_for(Duration::zero()).to_string(), "$1.00");
        assert_eq!(fare_for(Duration::minutes(10)).to_string(), "$3.90");
        assert_eq!(fare_for(Duration::seconds(601)).to_string(), "$4.19");
        let a = GeoPoint {
            lat: 33.77,
            lon: -84.39,
        };
        let s = Utc.with_ymd_and_hms(2019, 2, 4, 15, 0, 0).unwrap();
        assert_eq!(
            estimate_cost(&Trip::new("x", a, a, s, s + Duration::minutes(3))).cents,
            187
        );
    }

    fn catalog() -> (Catalog, Vec<String>) {
        let mk = |id: &str, primary: &str, group: &str| {
            let mut p = poi(id, 33.77, -84.39, primary);
            p.group = Some(group.to_string());
            p
        };
        let cat = Catalog::new(vec![
            mk("law", "lawyer", "Business"),
            mk("re", "real_estate_agency", "Business"),
            mk("food", "restaurant", "Food"),
            mk("park", "parking", "Parking"),
            mk("mix", "multiple", "Multiple"),
        ])
        .unwrap();
        let groups = ["Business", "Food", "Parking", "Multiple"]
            .map(String::from)
            .to_vec();
        (cat, groups)
    }

    fn at(o: &str, d: &str, start: DateTime<Utc>) -> AssociatedTrip {
        let p = GeoPoint {
            lat: 33.77,
            lon: -84.39,
        };
        AssociatedTrip {
            trip: Trip::new("s", p, p, start, start + Duration::minutes(12)),
            origin_poi: o.into(),
            origin_dist_m: 1.0,
            dest_poi: d.into(),
            dest_dist_m: 1.0,
            origin_reassigned: false,
        }
    }

    fn noon_monday() -> DateTime<Utc> {
        New_York
            .with_ymd_and_hms(2019, 2, 4, 12, 0, 0)
            .unwrap()
            .with_timezone(&Utc)
    }

    #[test]
    fn direct_counts() {
        let (cat, groups) = catalog();
        let trips = vec![
            at("law", "food", noon_monday()),
            at("re", "food", noon_monday()),
            at("park", "law", noon_monday()),
        ];
        let m = build_matrix(&trips, &cat, &groups, New_York, Slice::Overall).unwrap();
        assert_eq!(m.cell("Business", "Food"), Some(2));
        assert_eq!(m.cell("Parking", "Business"), Some(1));
        assert_eq!(m.total(), 3);
        let empty = build_matrix(&[], &cat, &groups, New_York, Slice::Overall).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(
            build_matrix(
                &[at("ghost", "law", noon_monday())],
                &cat,
                &groups,
                New_York,
                Slice::Overall
            ),
            Err(PurposeError::DanglingPoiReference(_))
        ));

        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "origin\\destination,Business,Food,Parking,Multiple"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "Business,0,2,0,0");
    }

    #[test]
    fn drill_down_counts_type_pairs() {
        let (cat, _) = catalog();
        let trips: Vec<_> = (0..3).map(|_| at("law", "re", noon_monday())).collect();
        let dd = drill_down(&trips, &cat, "Business", "Business").unwrap();
        assert_eq!(dd.counts.len(), 1);
        assert_eq!(
            dd.counts[&("lawyer".to_string(), "real_estate_agency".to_string())],
            3
        );
        assert!(drill_down(&trips, &cat, "Food", "Parking")
            .unwrap()
            .counts
            .is_empty());
        let dd = drill_down(
            &[at("mix", "mix", noon_monday())],
            &cat,
            "Multiple",
            "Multiple",
        )
        .unwrap();
        assert_eq!(dd.total(), 1);
        let mut csv = Vec::new();
        dd.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "origin_type,dest_type,count\nmultiple,multiple,1\n"
        );
        assert_eq!(
            parse_group_pair("Business:Food").unwrap(),
            ("Business".into(), "Food".into())
        );
        assert!(parse_group_pair("Business").is_err());
    }

    fn arb_trips() -> impl Strategy<Value = Vec<AssociatedTrip>> {
        let ids = ["law", "re", "food", "park", "mix"];
        prop::collection::vec((0usize..5, 0usize..5, 0i64..14, 0i64..14 * 60), 0..300).prop_map(
            move |v| {
                v.into_iter()
                    .map(|(o, d, day, minute)| {
                        let local = New_York.with_ymd_and_hms(2019, 2, 1, 7, 0, 0).unwrap()
                            + Duration::days(day)
                            + Duration::minutes(minute);
                        at(ids[o], ids[d], local.with_timezone(&Utc))
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn slices_reconcile(trips in arb_trips()) {
            let (cat, groups) = catalog();
            let set = build_all(&trips, &cat, &groups, New_York).unwrap();
            prop_assert_eq!(set.overall.total(), trips.len() as u64);
            let mut slots = PurposeMatrix::zeros(&groups, Slice::Overall);
            for s in &set.slots {
                slots.add(s);
            }
            prop_assert_eq!(&slots, &set.overall);
            let mut days = set.weekday.clone();
            days.add(&set.weekend);
            days.slice = Slice::Overall;
            prop_assert_eq!(&days, &set.overall);
            for (i, s) in TimeSlot::ALL.iter().enumerate() {
                prop_assert_eq!(&build_matrix(&trips, &cat, &groups, New_York, Slice::Slot(*s)).unwrap(), &set.slots[i]);
            }
            for og in &groups {
                for dg in &groups {
                    let dd = drill_down(&trips, &cat, og, dg).unwrap();
                    prop_assert_eq!(Some(dd.total()), set.overall.cell(og, dg));
                }
            }
        }

        #[test]
        fn reversed_trips_transpose(trips in arb_trips()) {
            let (cat, groups) = catalog();
            let reversed: Vec<_> = trips
                .iter()
                .map(|a| AssociatedTrip { origin_poi: a.dest_poi.clone(), dest_poi: a.origin_poi.clone(), ..a.clone() })
                .collect();
            let m = build_matrix(&trips, &cat, &groups, New_York, Slice::Overall).unwrap();
            let r = build_matrix(&reversed, &cat, &groups, New_York, Slice::Overall).unwrap();
            prop_assert_eq!(r.transpose(), m);
        }

        #[test]
        fn fare_is_monotone(a in 0i64..10_000, b in 0i64..10_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(fare_for(Duration::seconds(lo)) <= fare_for(Duration::seconds(hi)));
        }
    }
}
