//! Synthetic fleet: ground-truth trips, the snapshot feed they produce, and a
//! scorer that checks extracted trips against the truth.
//!
//! A scooter is listed at tick `t` unless some movement has `start < t < end`;
//! a movement starting or ending exactly on a tick is still parked there.
//! Ticks are multiples of the cadence since the Unix epoch.

use std::collections::HashMap;
use std::io::Write;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, offset_azimuthal, BBox, GeoPoint};
use crate::ingest::{write_jsonl_batch, ScooterObservation, SnapshotBatch};
use crate::trips::{Trip, COLOCATION_EPSILON_M};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
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
}

/// Trips per scooter per hour in each time slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateProfile {
    pub morning: f64,
    pub lunch: f64,
    pub afternoon: f64,
    pub evening: f64,
    pub night: f64,
}

impl Default for RateProfile {
    fn default() -> Self {
        RateProfile {
            morning: 0.25,
            lunch: 0.3,
            afternoon: 0.3,
            evening: 0.35,
            night: 0.25,
        }
    }
}

impl RateProfile {
    fn at_hour(&self, h: u32) -> f64 {
        match h {
            7..=10 => self.morning,
            11..=13 => self.lunch,
            14..=16 => self.afternoon,
            17..=18 => self.evening,
            _ => self.night,
        }
    }

    fn max(&self) -> f64 {
        [
            self.morning,
            self.lunch,
            self.afternoon,
            self.evening,
            self.night,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementRange {
    pub min_m: f64,
    pub max_m: f64,
}

/// A neighborhood trips are drawn towards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    #[serde(default)]
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub spread_m: f64,
}

/// Nightly collection for charging: picked up between 21:00 and 23:00,
/// dropped somewhere else between 05:00 and 06:30 the next morning, and
/// sometimes moved again before 07:00.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Charging {
    pub nightly_share: f64,
    pub reposition_share: f64,
}

impl Default for Charging {
    fn default() -> Self {
        Charging {
            nightly_share: 0.3,
            reposition_share: 0.2,
        }
    }
}

/// Shares of trips deliberately generated to break the cleaning rules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Planted {
    /// Of daytime trips: displacement in [1.5, 74.5] m.
    pub too_short: f64,
    /// Of daytime trips: displacement in [3001, 4500] m.
    pub too_long: f64,
    /// Per scooter-day: chance of one extra trip before 07:00 or after 21:00.
    pub off_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub fleet_size: u32,
    pub start_date: NaiveDate,
    pub days: u32,
    pub cadence_s: u32,
    pub timezone: Tz,
    pub bbox: BBox,
    pub rates: RateProfile,
    pub displacement: DisplacementRange,
    pub speed_mps: f64,
    pub anchors: Vec<Anchor>,
    /// Share of daytime trips heading to an anchor when anchors are given.
    pub anchor_share: f64,
    /// Standard deviation of per-observation GPS noise in meters.
    pub jitter_m: f64,
    pub charging: Charging,
    /// Leave at least one listed tick between consecutive movements of a
    /// scooter, so every trip can be told apart in the feed.
    pub separate_trips: bool,
    pub planted: Planted,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            fleet_size: 100,
            start_date: NaiveDate::from_ymd_opt(2019, 2, 1).expect("valid date"),
            days: 7,
            cadence_s: 600,
            timezone: chrono_tz::America::New_York,
            bbox: BBox::study_region(),
            rates: RateProfile::default(),
            displacement: DisplacementRange {
                min_m: 100.0,
                max_m: 2500.0,
            },
            speed_mps: 4.0,
            anchors: vec![],
            anchor_share: 0.7,
            jitter_m: 0.0,
            charging: Charging::default(),
            separate_trips: true,
            planted: Planted::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let share = |x: f64| (0.0..=1.0).contains(&x);
        if self.cadence_s == 0 || 3600 % self.cadence_s != 0 {
            return bad(format!("cadence {} s must divide one hour", self.cadence_s));
        }
        if self.fleet_size == 0 || self.days == 0 {
            return bad("fleet_size and days must be positive".into());
        }
        let r = &self.rates;
        if [r.morning, r.lunch, r.afternoon, r.evening, r.night]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return bad("trip rates must be finite and non-negative".into());
        }
        let d = &self.displacement;
        if !(d.min_m > COLOCATION_EPSILON_M && d.min_m <= d.max_m && d.max_m <= 10_000.0) {
            return bad(format!(
                "displacement range [{}, {}] must lie within ({COLOCATION_EPSILON_M}, 10000] m",
                d.min_m, d.max_m
            ));
        }
        if !(self.speed_mps > 0.0 && self.speed_mps.is_finite()) {
            return bad("speed must be positive".into());
        }
        if !(self.jitter_m >= 0.0 && self.jitter_m.is_finite()) {
            return bad("jitter must be non-negative".into());
        }
        let p = &self.planted;
        if ![
            self.anchor_share,
            self.charging.nightly_share,
            self.charging.reposition_share,
            p.too_short,
            p.too_long,
            p.off_hours,
        ]
        .into_iter()
        .all(share)
            || p.too_short + p.too_long > 1.0
        {
            return bad("shares must lie in [0, 1]".into());
        }
        for a in &self.anchors {
            if GeoPoint::new(a.lat, a.lon).is_err()
                || !(a.spread_m >= 0.0 && a.spread_m <= 10_000.0)
            {
                return bad(format!("anchor `{}` is invalid", a.name));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        let config: ScenarioConfig = read_json(path)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripLabel {
    Normal,
    TooShort,
    TooLong,
    OffHours,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTrip {
    pub scooter_id: String,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    pub label: TripLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelocationKind {
    Charging,
    Reposition,
}

/// Operator movement of a scooter; it vanishes from the feed like a ride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relocation {
    pub scooter_id: String,
    pub kind: RelocationKind,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterStart {
    pub scooter_id: String,
    pub position: GeoPoint,
}

/// Everything needed to regenerate the feed and to score extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub cadence_s: u32,
    pub timezone: Tz,
    pub feed_start: DateTime<Utc>,
    pub feed_end: DateTime<Utc>,
    pub jitter_m: f64,
    pub scooters: Vec<ScooterStart>,
    pub trips: Vec<TruthTrip>,
    pub relocations: Vec<Relocation>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| SynthError::Json {
        path: path.display().to_string(),
        source,
    })
}

impl GroundTruth {
    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        read_json(path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    fn floor_tick(&self, t: i64) -> i64 {
        t.div_euclid(self.cadence_s as i64) * self.cadence_s as i64
    }

    fn ceil_tick(&self, t: i64) -> i64 {
        -(-t).div_euclid(self.cadence_s as i64) * self.cadence_s as i64
    }

    /// Movements grouped by scooter, ordered by start.
    fn movements(&self) -> HashMap<&str, Vec<Movement>> {
        let mut by: HashMap<&str, Vec<Movement>> = HashMap::new();
        for (i, t) in self.trips.iter().enumerate() {
            by.entry(&t.scooter_id).or_default().push(Movement {
                trip: Some(i),
                origin: t.origin,
                destination: t.destination,
                start: t.start_ts.timestamp(),
                end: t.end_ts.timestamp(),
            });
        }
        for r in &self.relocations {
            by.entry(&r.scooter_id).or_default().push(Movement {
                trip: None,
                origin: r.origin,
                destination: r.destination,
                start: r.start_ts.timestamp(),
                end: r.end_ts.timestamp(),
            });
        }
        for v in by.values_mut() {
            v.sort_by_key(|m| (m.start, m.end));
        }
        by
    }

    /// Runs of movements with no listed tick between them. Each run shows
    /// up in the feed as at most one displacement.
    pub fn chains(&self) -> Vec<Chain> {
        let mut ids: Vec<&str> = self
            .scooters
            .iter()
            .map(|s| s.scooter_id.as_str())
            .collect();
        ids.sort_unstable();
        let by = self.movements();
        let (feed_start, feed_end) = (self.feed_start.timestamp(), self.feed_end.timestamp());
        let mut out = Vec::new();
        for id in ids {
            let Some(moves) = by.get(id) else { continue };
            let mut i = 0;
            while i < moves.len() {
                let mut j = i;
                while j + 1 < moves.len() && self.ceil_tick(moves[j].end) > moves[j + 1].start {
                    j += 1;
                }
                let run = &moves[i..=j];
                let from = self.floor_tick(run[0].start);
                let to = self.ceil_tick(run[run.len() - 1].end);
                let day = |t: i64| {
                    DateTime::from_timestamp(t, 0)
                        .expect("in range")
                        .with_timezone(&self.timezone)
                        .date_naive()
                };
                let origin = run[0].origin;
                let destination = run[run.len() - 1].destination;
                let observed = from >= feed_start && to <= feed_end && day(from) == day(to);
                let extractable =
                    observed && haversine_m(origin, destination) > COLOCATION_EPSILON_M;
                out.push(Chain {
                    scooter_id: id.to_string(),
                    trips: run.iter().filter_map(|m| m.trip).collect(),
                    relocations: run.iter().filter(|m| m.trip.is_none()).count(),
                    origin,
                    destination,
                    start_ts: DateTime::from_timestamp(from, 0).expect("in range"),
                    end_ts: DateTime::from_timestamp(to, 0).expect("in range"),
                    extractable,
                });
                i = j + 1;
            }
        }
        out
    }

    /// The trips a faithful extractor must produce from a noise-free feed,
    /// ordered by scooter then start.
    pub fn expected_extractions(&self) -> Vec<Trip> {
        self.chains()
            .into_iter()
            .filter(|c| c.extractable)
            .map(|c| Trip::new(c.scooter_id, c.origin, c.destination, c.start_ts, c.end_ts))
            .collect()
    }

    /// Indices of trips that stand alone in an extractable chain.
    pub fn recoverable(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .chains()
            .into_iter()
            .filter(|c| c.extractable && c.relocations == 0 && c.trips.len() == 1)
            .map(|c| c.trips[0])
            .collect();
        v.sort_unstable();
        v
    }

    pub fn feed(&self) -> Feed<'_> {
        Feed::new(self)
    }

    pub fn write_feed_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<u64> {
        let mut n = 0;
        for batch in self.feed() {
            n += batch.observations.len() as u64;
            write_jsonl_batch(&mut w, &batch)?;
        }
        w.flush()?;
        Ok(n)
    }
}

struct Movement {
    trip: Option<usize>,
    origin: GeoPoint,
    destination: GeoPoint,
    start: i64,
    end: i64,
}

/// Consecutive movements of one scooter that no listed tick separates.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub scooter_id: String,
    /// Indices into `GroundTruth::trips`.
    pub trips: Vec<usize>,
    pub relocations: usize,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    /// Last tick before the chain and first tick after it.
    pub start_ts: DateTime<Utc>,
    pub end_ts: DateTime<Utc>,
    /// Both ticks fall in the feed on one local day and the scooter moved
    /// more than the colocation epsilon.
    pub extractable: bool,
}

/// Lazily produced snapshot batches for a [`GroundTruth`].
pub struct Feed<'a> {
    truth: &'a GroundTruth,
    moves: Vec<Vec<(i64, i64, GeoPoint)>>,
    cursor: Vec<usize>,
    position: Vec<GeoPoint>,
    tick: i64,
    end: i64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl<'a> Feed<'a> {
    fn new(truth: &'a GroundTruth) -> Self {
        let index: HashMap<&str, usize> = truth
            .scooters
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scooter_id.as_str(), i))
            .collect();
        let mut moves = vec![Vec::new(); truth.scooters.len()];
        let all = truth
            .trips
            .iter()
            .map(|t| (&t.scooter_id, t.start_ts, t.end_ts, t.destination))
            .chain(
                truth
                    .relocations
                    .iter()
                    .map(|r| (&r.scooter_id, r.start_ts, r.end_ts, r.destination)),
            );
        for (id, s, e, dest) in all {
            if let Some(&i) = index.get(id.as_str()) {
                moves[i].push((s.timestamp(), e.timestamp(), dest));
            }
        }
        for m in &mut moves {
            m.sort_by_key(|x| (x.0, x.1));
        }
        Feed {
            truth,
            cursor: vec![0; moves.len()],
            position: truth.scooters.iter().map(|s| s.position).collect(),
            moves,
            tick: truth.feed_start.timestamp(),
            end: truth.feed_end.timestamp(),
            rng: ChaCha8Rng::seed_from_u64(truth.seed ^ 0x6a09_e667_f3bc_c908),
            noise: (truth.jitter_m > 0.0)
                .then(|| Normal::new(0.0, truth.jitter_m).expect("valid sigma")),
        }
    }
}

impl Iterator for Feed<'_> {
    type Item = SnapshotBatch;

    fn next(&mut self) -> Option<SnapshotBatch> {
        if self.tick > self.end {
            return None;
        }
        let t = self.tick;
        let mut observations = Vec::with_capacity(self.position.len());
        for (i, s) in self.truth.scooters.iter().enumerate() {
            let moves = &self.moves[i];
            while self.cursor[i] < moves.len() && moves[self.cursor[i]].1 <= t {
                self.position[i] = moves[self.cursor[i]].2;
                self.cursor[i] += 1;
            }
            if self.cursor[i] < moves.len() && moves[self.cursor[i]].0 < t {
                continue;
            }
            let mut position = self.position[i];
            if let Some(noise) = &self.noise {
                let (dn, de) = (noise.sample(&mut self.rng), noise.sample(&mut self.rng));
                let r = dn.hypot(de).min(10_000.0);
                position =
                    offset_azimuthal(position, de.atan2(dn).to_degrees().rem_euclid(360.0), r);
            }
            observations.push(ScooterObservation {
                scooter_id: s.scooter_id.clone(),
                position,
            });
        }
        self.tick += self.truth.cadence_s as i64;
        Some(SnapshotBatch {
            ts: DateTime::from_timestamp(t, 0).expect("in range"),
            observations,
        })
    }
}

pub fn scooter_id(i: u32) -> String {
    format!("scooter-{i:05}")
}

/// Ground truth and the full feed it produces.
pub fn generate(config: &ScenarioConfig) -> Result<(GroundTruth, Vec<SnapshotBatch>), SynthError> {
    let truth = generate_truth(config)?;
    let feed = truth.feed().collect();
    Ok((truth, feed))
}

pub fn generate_truth(config: &ScenarioConfig) -> Result<GroundTruth, SynthError> {
    config.validate()?;
    let tz = config.timezone;
    let local = |date: NaiveDate, secs: i64| -> i64 {
        let midnight = tz
            .from_local_datetime(&date.and_time(NaiveTime::MIN))
            .earliest()
            .expect("local midnight exists");
        midnight.timestamp() + secs
    };
    let last_date = config.start_date + Duration::days(config.days as i64 - 1);
    let feed_start = local(config.start_date, 0);
    let feed_end = local(last_date + Duration::days(1), 0) - config.cadence_s as i64;

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = GroundTruth {
        seed: config.seed,
        cadence_s: config.cadence_s,
        timezone: tz,
        feed_start: DateTime::from_timestamp(feed_start, 0).expect("in range"),
        feed_end: DateTime::from_timestamp(feed_end, 0).expect("in range"),
        jitter_m: config.jitter_m,
        scooters: Vec::with_capacity(config.fleet_size as usize),
        trips: Vec::new(),
        relocations: Vec::new(),
    };
    for i in 0..config.fleet_size {
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let mut sim = ScooterSim {
            config,
            id: scooter_id(i),
            position: GeoPoint { lat: 0.0, lon: 0.0 },
            earliest: feed_start,
            truth: &mut truth,
        };
        sim.position = sim.random_spot(&mut rng);
        let start = sim.position;
        for d in 0..config.days {
            let date = config.start_date + Duration::days(d as i64);
            let at = |secs: i64| local(date, secs);
            let next_morning = |secs: i64| local(date + Duration::days(1), secs);
            sim.day(&mut rng, at, next_morning, d + 1 == config.days);
        }
        truth.scooters.push(ScooterStart {
            scooter_id: scooter_id(i),
            position: start,
        });
    }
    Ok(truth)
}

const HOUR: i64 = 3600;

struct ScooterSim<'a> {
    config: &'a ScenarioConfig,
    id: String,
    position: GeoPoint,
    /// No movement may start before this instant.
    earliest: i64,
    truth: &'a mut GroundTruth,
}

impl ScooterSim<'_> {
    fn cadence(&self) -> i64 {
        self.config.cadence_s as i64
    }

    fn random_spot(&self, rng: &mut ChaCha8Rng) -> GeoPoint {
        let b = &self.config.bbox;
        if !self.config.anchors.is_empty() && rng.gen_bool(self.config.anchor_share) {
            return self.near_anchor(rng);
        }
        GeoPoint {
            lat: rng.gen_range(b.min.lat..=b.max.lat),
            lon: rng.gen_range(b.min.lon..=b.max.lon),
        }
    }

    fn near_anchor(&self, rng: &mut ChaCha8Rng) -> GeoPoint {
        let a = &self.config.anchors[rng.gen_range(0..self.config.anchors.len())];
        let r = a.spread_m * rng.gen::<f64>().sqrt();
        offset_azimuthal(
            GeoPoint {
                lat: a.lat,
                lon: a.lon,
            },
            rng.gen_range(0.0..360.0),
            r,
        )
    }

    /// A destination `d` meters away, preferring one inside the study box.
    fn at_distance(&self, rng: &mut ChaCha8Rng, d: f64) -> GeoPoint {
        let mut candidate = self.position;
        for _ in 0..12 {
            candidate = offset_azimuthal(self.position, rng.gen_range(0.0..360.0), d);
            if self.config.bbox.contains(candidate) {
                break;
            }
        }
        candidate
    }

    fn destination(&self, rng: &mut ChaCha8Rng, label: TripLabel) -> GeoPoint {
        let range = self.config.displacement;
        match label {
            TripLabel::TooShort => {
                let d = rng.gen_range(1.5..=74.5);
                self.at_distance(rng, d)
            }
            TripLabel::TooLong => {
                let d = rng.gen_range(3001.0..=4500.0);
                self.at_distance(rng, d)
            }
            TripLabel::Normal | TripLabel::OffHours => {
                if !self.config.anchors.is_empty() && rng.gen_bool(self.config.anchor_share) {
                    for _ in 0..8 {
                        let p = self.near_anchor(rng);
                        let d = haversine_m(self.position, p);
                        if d >= range.min_m && d <= range.max_m {
                            return p;
                        }
                    }
                }
                let d = rng.gen_range(range.min_m..=range.max_m);
                self.at_distance(rng, d)
            }
        }
    }

    fn ride_seconds(&self, rng: &mut ChaCha8Rng, d: f64) -> i64 {
        let riding = d / self.config.speed_mps * rng.gen_range(1.0..1.5);
        (riding + rng.gen_range(30.0..120.0)).round().max(1.0) as i64
    }

    /// Earliest start after a movement ending at `end`.
    fn after(&self, rng: &mut ChaCha8Rng, end: i64) -> i64 {
        if self.config.separate_trips {
            let c = self.cadence();
            -(-end).div_euclid(c) * c
        } else {
            end + rng.gen_range(0..120)
        }
    }

    fn push_trip(
        &mut self,
        rng: &mut ChaCha8Rng,
        start: i64,
        label: TripLabel,
        latest_end: i64,
    ) -> bool {
        let destination = self.destination(rng, label);
        let end = start + self.ride_seconds(rng, haversine_m(self.position, destination));
        if end > latest_end {
            return false;
        }
        self.truth.trips.push(TruthTrip {
            scooter_id: self.id.clone(),
            origin: self.position,
            destination,
            start_ts: DateTime::from_timestamp(start, 0).expect("in range"),
            end_ts: DateTime::from_timestamp(end, 0).expect("in range"),
            label,
        });
        self.position = destination;
        self.earliest = self.after(rng, end);
        true
    }

    fn push_relocation(
        &mut self,
        rng: &mut ChaCha8Rng,
        kind: RelocationKind,
        start: i64,
        end: i64,
        destination: GeoPoint,
    ) {
        self.truth.relocations.push(Relocation {
            scooter_id: self.id.clone(),
            kind,
            origin: self.position,
            destination,
            start_ts: DateTime::from_timestamp(start, 0).expect("in range"),
            end_ts: DateTime::from_timestamp(end, 0).expect("in range"),
        });
        self.position = destination;
        self.earliest = self.after(rng, end);
    }

    /// One local day. `at` maps seconds after local midnight to a Unix time.
    fn day(
        &mut self,
        rng: &mut ChaCha8Rng,
        at: impl Fn(i64) -> i64,
        next_morning: impl Fn(i64) -> i64,
        last_day: bool,
    ) {
        let cadence = self.cadence();
        let opening = at(7 * HOUR);
        // A trip must end a full tick before 21:00 so its closing tick is
        // still inside operating hours.
        let latest_end = at(21 * HOUR) - cadence;
        let planted = self.config.planted;

        // Early-morning reposition after a charging drop-off.
        if self.earliest > at(0)
            && self.earliest < at(6 * HOUR + 35 * 60)
            && rng.gen_bool(self.config.charging.reposition_share)
        {
            let start = rng.gen_range(self.earliest..at(6 * HOUR + 35 * 60));
            let dest = self.destination(rng, TripLabel::Normal);
            let end = start
                + self
                    .ride_seconds(rng, haversine_m(self.position, dest))
                    .min(20 * 60);
            self.push_relocation(rng, RelocationKind::Reposition, start, end, dest);
        }

        let off_hours = rng.gen_bool(planted.off_hours);
        let early = off_hours && rng.gen_bool(0.5);
        let late = off_hours && !early;
        if early {
            let lo = self.earliest.max(at(5 * HOUR));
            let hi = at(6 * HOUR + 30 * 60);
            if lo < hi {
                let start = rng.gen_range(lo..hi);
                self.push_trip(rng, start, TripLabel::OffHours, at(7 * HOUR) - 1);
            }
        }

        let peak = self.config.rates.max();
        if peak > 0.0 {
            let mut t = opening as f64;
            loop {
                t += -(1.0 - rng.gen::<f64>()).ln() * HOUR as f64 / peak;
                let proposed = t as i64;
                if proposed >= latest_end {
                    break;
                }
                let hour = ((proposed - at(0)) / HOUR) as u32;
                if !rng.gen_bool((self.config.rates.at_hour(hour) / peak).min(1.0)) {
                    continue;
                }
                let start = if proposed < self.earliest {
                    self.earliest + rng.gen_range(0..cadence)
                } else {
                    proposed
                };
                if start >= latest_end {
                    break;
                }
                let u: f64 = rng.gen();
                let label = if u < planted.too_short {
                    TripLabel::TooShort
                } else if u < planted.too_short + planted.too_long {
                    TripLabel::TooLong
                } else {
                    TripLabel::Normal
                };
                if !self.push_trip(rng, start, label, latest_end) {
                    break;
                }
                t = t.max(self.earliest as f64);
            }
        }

        if late {
            let lo = self.earliest.max(at(21 * HOUR));
            let hi = at(22 * HOUR);
            if lo < hi {
                let start = rng.gen_range(lo..hi);
                self.push_trip(rng, start, TripLabel::OffHours, at(23 * HOUR + 30 * 60));
            }
        }

        if !last_day && rng.gen_bool(self.config.charging.nightly_share) {
            let lo = self.earliest.max(at(21 * HOUR));
            let hi = at(23 * HOUR);
            if lo < hi {
                let start = rng.gen_range(lo..hi);
                let end = rng.gen_range(next_morning(5 * HOUR)..next_morning(6 * HOUR + 30 * 60));
                let dest = self.random_spot(rng);
                self.push_relocation(rng, RelocationKind::Charging, start, end, dest);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub truth_trips: u64,
    pub recoverable: u64,
    pub matched: u64,
    pub recall: f64,
    /// Trips the feed cannot show: those merged into a neighbor's displacement
    /// (one extracted trip stands for a whole chain) or never displaced within
    /// one observed day.
    pub unrecoverable: u64,
    pub relocations: u64,
    pub extracted: u64,
    /// Extracted trips that match no truth trip (relocations, merged chains, noise).
    pub unmatched_extracted: u64,
    /// Recoverable trips matched by more than one extracted trip.
    pub ambiguous: u64,
    pub max_start_error_s: i64,
    pub max_end_error_s: i64,
}

/// Matches each recoverable truth trip to the extracted trip of the same
/// scooter whose window covers it and whose endpoints agree.
pub fn score(truth: &GroundTruth, extracted: &[Trip]) -> ScoreReport {
    let cadence = truth.cadence_s as i64;
    let tolerance = if truth.jitter_m > 0.0 {
        6.0 * truth.jitter_m
    } else {
        0.0
    };
    let mut by_scooter: HashMap<&str, Vec<(usize, &Trip)>> = HashMap::new();
    for (i, t) in extracted.iter().enumerate() {
        by_scooter.entry(&t.scooter_id).or_default().push((i, t));
    }
    let chains = truth.chains();
    let mut report = ScoreReport {
        truth_trips: truth.trips.len() as u64,
        relocations: truth.relocations.len() as u64,
        extracted: extracted.len() as u64,
        ..Default::default()
    };
    let mut used = vec![false; extracted.len()];
    for c in &chains {
        if c.trips.is_empty() {
            continue;
        }
        let credited = c.extractable && c.relocations == 0;
        report.unrecoverable += c.trips.len() as u64 - u64::from(credited);
        if !(credited && c.trips.len() == 1) {
            continue;
        }
        report.recoverable += 1;
        let truth_trip = &truth.trips[c.trips[0]];
        let (ts, te) = (
            truth_trip.start_ts.timestamp(),
            truth_trip.end_ts.timestamp(),
        );
        let candidates: Vec<(usize, &Trip)> = by_scooter
            .get(truth_trip.scooter_id.as_str())
            .into_iter()
            .flatten()
            .copied()
            .filter(|(_, x)| {
                let (xs, xe) = (x.start_ts.timestamp(), x.end_ts.timestamp());
                xs <= ts
                    && ts < xs + cadence
                    && te <= xe
                    && xe < te + cadence
                    && haversine_m(x.origin, truth_trip.origin) <= tolerance
                    && haversine_m(x.destination, truth_trip.destination) <= tolerance
            })
            .collect();
        match candidates.as_slice() {
            [(i, x)] => {
                report.matched += 1;
                used[*i] = true;
                report.max_start_error_s =
                    report.max_start_error_s.max(ts - x.start_ts.timestamp());
                report.max_end_error_s = report.max_end_error_s.max(x.end_ts.timestamp() - te);
            }
            [] => {}
            _ => report.ambiguous += 1,
        }
    }
    report.unmatched_extracted = used.iter().filter(|u| !**u).count() as u64;
    report.recall = if report.recoverable == 0 {
        1.0
    } else {
        report.matched as f64 / report.recoverable as f64
    };
    report
}
